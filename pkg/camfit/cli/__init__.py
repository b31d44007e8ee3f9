"""
Command-line subcommands for camfit
"""
