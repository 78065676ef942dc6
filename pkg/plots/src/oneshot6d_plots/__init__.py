"""Plotting for oneshot6d evaluation artifacts.

Consumes only the documented CSV schemas (docs/formats.md in the main
package); renders deterministic SVG so outputs can be diffed and hashed.
"""

__version__ = "0.1.0"
