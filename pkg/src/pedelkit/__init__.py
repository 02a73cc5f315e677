"""Linear-MDP policy identification through online experiment design."""
__version__ = "0.1.0"
