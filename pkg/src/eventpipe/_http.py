"""Shared HTTP plumbing for the remote provider clients."""
from __future__ import annotations

import time
from typing import Any

import requests

__all__ = ["ProviderError", "post_json"]


class ProviderError(RuntimeError):
    """A remote provider failed after bounded retries."""


def post_json(
    url: str,
    payload: dict[str, Any],
    *,
    timeout: float = 30.0,
    max_retries: int = 3,
    headers: dict[str, str] | None = None,
    what: str = "provider",
    backoff: float = 0.5,
) -> Any:
    """POST JSON and return the decoded JSON response, retrying transient failures.

    Retries transport errors and 5xx/429 responses up to max_retries attempts
    with linear backoff; anything else raises ProviderError immediately.
    """
    last_error: str = "no attempt made"
    for attempt in range(1, max_retries + 1):
        try:
            resp = requests.post(url, json=payload, timeout=timeout, headers=headers)
        except requests.RequestException as exc:
            last_error = f"transport error: {exc}"
        else:
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ProviderError(f"{what} returned non-JSON response: {exc}") from exc
            if resp.status_code in (429,) or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
            else:
                raise ProviderError(f"{what} returned HTTP {resp.status_code}")
        if attempt < max_retries:
            time.sleep(backoff * attempt)
    raise ProviderError(f"{what} failed after {max_retries} attempts ({last_error})")
