"""
CLI Command Handlers
====================

One module per subcommand group. Handlers take validated arguments, call
into the services and write outputs; they never parse flags themselves.
"""
