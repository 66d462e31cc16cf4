import sys

from optctrl.main import main

sys.exit(main())
