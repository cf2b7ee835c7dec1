"""HTTP service exposing the compute endpoint."""

from .app import EndpointError, HttpClient, ServiceHandle, create_app

__all__ = ["EndpointError", "HttpClient", "ServiceHandle", "create_app"]
