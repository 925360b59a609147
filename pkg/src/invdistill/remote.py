"""Optional client for an external scoring service (``POST /score``)."""

from __future__ import annotations

import json
import math
import os
import time
import urllib.error
import urllib.request

import numpy as np

from .errors import ProtocolError, RemoteUnavailable

ENV_VAR = "INVDISTILL_SCORE_URL"
ATTEMPTS = 3
BACKOFF = 0.5


def endpoint_from_env() -> str | None:
    url = os.environ.get(ENV_VAR, "").strip()
    return url or None


def _score_url(endpoint: str) -> str:
    return endpoint if endpoint.rstrip("/").endswith("/score") else endpoint.rstrip("/") + "/score"


def remote_score(endpoint: str, sequences, timeout: float = 10.0, attempts: int = ATTEMPTS,
                 backoff: float = BACKOFF, sleep=time.sleep) -> list:
    """Total NLL (nats) of every sequence according to the remote model.

    Connection failures and timeouts are retried with exponential backoff;
    after the last attempt :class:`RemoteUnavailable` is raised. A reply that
    is not ``{"nll": [float, ...]}`` of matching length is a protocol error.
    """
    seqs = [[int(t) for t in s] for s in np.asarray(sequences, dtype=np.int64)]
    body = json.dumps({"sequences": seqs}).encode("utf-8")
    request = urllib.request.Request(_score_url(endpoint), data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
    last = None
    for attempt in range(attempts):
        try:
            with urllib.request.urlopen(request, timeout=timeout) as resp:
                payload = resp.read()
            break
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last = exc
            if attempt + 1 < attempts:
                sleep(backoff * 2 ** attempt)
    else:
        raise RemoteUnavailable(f"scoring endpoint unreachable after {attempts} attempts: {last}")
    try:
        reply = json.loads(payload)
        nll = [float(v) for v in reply["nll"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed scoring reply: {exc}") from None
    if len(nll) != len(seqs) or not all(math.isfinite(v) for v in nll):
        raise ProtocolError("scoring reply does not hold one finite NLL per sequence")
    return nll


def gen_ppl(nll, lengths) -> float:
    """Perplexity: ``exp`` of total NLL divided by total token count."""
    total = float(np.sum(lengths))
    if total <= 0:
        raise ProtocolError("cannot compute perplexity over zero tokens")
    return float(np.exp(np.sum(nll) / total))
