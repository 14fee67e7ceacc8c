"""Control-flow-integrity toolkit for serverless-style applications.

Learns per-function and per-application flow graphs from execution traces
and enforces them at runtime through a guard/controller protocol, with
credential obfuscation and rate limiting, exercised against a deterministic
application simulator.
"""

__version__ = "0.1.0"
