"""Single-session Python interpreter worker.

Reads one JSON request frame per stdin line, executes code in a persistent
namespace, and writes one JSON response frame per line to stdout.  Names,
imports, and intermediate results survive across exec requests until a
reset; two worker processes never share state.
"""

from .worker import Worker, main

__all__ = ["Worker", "main"]
__version__ = "0.1.0"
