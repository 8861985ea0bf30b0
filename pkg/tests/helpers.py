"""Shared test utilities (thin re-export of the package gradient checker,
with assertion-style semantics for pytest)."""

from tuvf.gradcheck import central_fd, check_gradients, leaf  # noqa: F401
