"""Multi-period AC optimal power flow with storage, with certificates that the
convex relaxation of the charge/discharge complementarity is exact."""

__version__ = "0.1.0"

from .network import NetworkCase, load_case, validate  # noqa: F401
