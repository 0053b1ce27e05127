"""Black-box denoiser handles, the l1-wavelet prox, Monte-Carlo divergence
estimation, and the external-denoiser wire-protocol client.

A denoiser is a deterministic map (noisy image, noise variance) -> estimate.
Built-in kinds:

* ``wavelet_soft``   orthogonal wavelet transform, complex soft-threshold at
                     lam*sqrt(tau), inverse transform (operates on complex
                     coefficients natively).
* ``gaussian_smooth`` periodic Gaussian convolution (unit DC gain).
* ``linear_test``    explicit matrix on the flattened image; used by tests
                     that need a known Jacobian trace.
* ``external``       a subprocess or TCP peer speaking the byte protocol
                     documented next to the client below.

Divergences here are always *normalized*: trace of the Jacobian divided by
the pixel count, estimated with real Gaussian probes and the real part of
the probe inner product.
"""

from __future__ import annotations

import math
import os
import selectors
import shlex
import socket
import struct
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .image import ComplexImage

# Orthogonal analysis filter banks (lowpass taps; the highpass is the
# quadrature mirror). Periodic boundary keeps the transform exactly
# orthonormal at any even length.
_SQ3 = math.sqrt(3.0)
_FILTERS = {
    "d4": np.array([1.0 + _SQ3, 3.0 + _SQ3, 3.0 - _SQ3, 1.0 - _SQ3]) / (4.0 * math.sqrt(2.0)),
    "haar": np.array([1.0, 1.0]) / math.sqrt(2.0),
}

DEFAULT_WAVELET = "d4"
DEFAULT_WAVELET_LEVELS = 4


def _filter_pair(wavelet: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        lo = _FILTERS[wavelet]
    except KeyError:
        raise ValueError(f"unknown wavelet {wavelet!r} (have {sorted(_FILTERS)})") from None
    hi = (lo[::-1] * np.where(np.arange(lo.size) % 2 == 0, 1.0, -1.0)).copy()
    return lo, hi


def _pow2_depth(n: int) -> int:
    depth = 0
    while n % 2 == 0 and n > 1:
        n //= 2
        depth += 1
    return depth


def effective_levels(shape: tuple[int, int], levels: int) -> int:
    """Decomposition depth actually usable for this shape."""
    return min(levels, _pow2_depth(shape[0]), _pow2_depth(shape[1]))


def _dwt_axis(x: np.ndarray, axis: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(lo.size)[None, :]) % n
    windows = x[idx]
    a = np.einsum("kt...,t->k...", windows, lo)
    d = np.einsum("kt...,t->k...", windows, hi)
    return np.moveaxis(np.concatenate([a, d], axis=0), 0, axis)


def _idwt_axis(x: np.ndarray, axis: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = np.moveaxis(x, axis, 0)
    half = x.shape[0] // 2
    a, d = x[:half], x[half:]
    out = np.zeros_like(x)
    # tap t of coefficient k feeds sample (2k + t) mod n
    for t in range(lo.size):
        out[t % 2 :: 2] += lo[t] * np.roll(a, t // 2, axis=0) + hi[t] * np.roll(d, t // 2, axis=0)
    return np.moveaxis(out, 0, axis)


def wavelet2(
    data: np.ndarray,
    levels: int = DEFAULT_WAVELET_LEVELS,
    wavelet: str = DEFAULT_WAVELET,
) -> np.ndarray:
    """Multi-level orthonormal 2D DWT, packed in-place (coarse band top-left)."""
    lo, hi = _filter_pair(wavelet)
    out = np.array(data, dtype=np.complex128)
    m0, m1 = out.shape
    for _ in range(effective_levels(out.shape, levels)):
        sub = out[:m0, :m1]
        sub = _dwt_axis(sub, 0, lo, hi)
        sub = _dwt_axis(sub, 1, lo, hi)
        out[:m0, :m1] = sub
        m0 //= 2
        m1 //= 2
    return out


def iwavelet2(
    data: np.ndarray,
    levels: int = DEFAULT_WAVELET_LEVELS,
    wavelet: str = DEFAULT_WAVELET,
) -> np.ndarray:
    """Inverse of :func:`wavelet2`."""
    lo, hi = _filter_pair(wavelet)
    out = np.array(data, dtype=np.complex128)
    eff = effective_levels(out.shape, levels)
    for lvl in reversed(range(eff)):
        m0 = out.shape[0] >> lvl
        m1 = out.shape[1] >> lvl
        sub = out[:m0, :m1]
        sub = _idwt_axis(sub, 1, lo, hi)
        sub = _idwt_axis(sub, 0, lo, hi)
        out[:m0, :m1] = sub
    return out


def soft_threshold(values: np.ndarray, threshold: float) -> np.ndarray:
    """Complex soft threshold: shrink magnitudes by ``threshold``, keep phase."""
    mag = np.abs(values)
    scale = np.zeros_like(mag)
    np.divide(np.maximum(mag - threshold, 0.0), mag, out=scale, where=mag > 0)
    return values * scale


def prox_l1_wavelet(
    r: ComplexImage,
    lambda_tau: float,
    levels: int = DEFAULT_WAVELET_LEVELS,
    wavelet: str = DEFAULT_WAVELET,
) -> ComplexImage:
    """Exact prox of lambda_tau * ||W x||_1 for the orthonormal wavelet W."""
    if lambda_tau < 0:
        raise ValueError("threshold must be non-negative")
    coeffs = wavelet2(r.data, levels, wavelet)
    return ComplexImage(iwavelet2(soft_threshold(coeffs, lambda_tau), levels, wavelet))


# ---------------------------------------------------------------------------
# denoiser handles


@dataclass
class DenoiserHandle:
    """A denoiser plus the policy for applying a real-channel map to complex
    images (``split_re_im`` treats the planes independently,
    ``magnitude_phase`` denoises magnitudes and restores the phase)."""

    kind: str
    params: dict = field(default_factory=dict)
    complex_policy: str = "split_re_im"
    calls: int = 0

    def __post_init__(self):
        if self.complex_policy not in ("split_re_im", "magnitude_phase"):
            raise ValueError(f"unknown complex policy {self.complex_policy!r}")


def wavelet_soft(
    lam: float = 1.0,
    levels: int = DEFAULT_WAVELET_LEVELS,
    wavelet: str = DEFAULT_WAVELET,
) -> DenoiserHandle:
    """Wavelet soft-threshold denoiser; threshold is lam * sqrt(tau)."""
    return DenoiserHandle(
        "wavelet_soft", {"lam": float(lam), "levels": int(levels), "wavelet": wavelet}
    )


def gaussian_smooth(width: float = 1.0) -> DenoiserHandle:
    """Periodic Gaussian smoothing with std ``width`` pixels (unit DC gain)."""
    return DenoiserHandle("gaussian_smooth", {"width": float(width)})


def linear_test(matrix: np.ndarray) -> DenoiserHandle:
    """Explicit linear map on the flattened image; exact divergence known."""
    mat = np.asarray(matrix)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("linear_test needs a square matrix")
    return DenoiserHandle("linear_test", {"matrix": mat})


def external(endpoint: str, timeout: float = 30.0) -> DenoiserHandle:
    """External denoiser: ``endpoint`` is a command line to spawn (stdio
    transport) or ``tcp:host:port``."""
    return DenoiserHandle("external", {"endpoint": endpoint, "timeout": float(timeout)})


def _gaussian_kernel(shape: tuple[int, int], width: float) -> np.ndarray:
    h, w = shape
    dy = np.minimum(np.arange(h), h - np.arange(h))[:, None]
    dx = np.minimum(np.arange(w), w - np.arange(w))[None, :]
    kern = np.exp(-(dy * dy + dx * dx) / (2.0 * width * width))
    return kern / kern.sum()


def _gaussian_state(h: DenoiserHandle, shape: tuple[int, int]):
    cache = h.params.setdefault("_cache", {})
    if shape not in cache:
        kern = _gaussian_kernel(shape, h.params["width"])
        cache[shape] = (np.fft.fft2(kern), float(kern[0, 0]))
    return cache[shape]


def _smooth(h: DenoiserHandle, data: np.ndarray) -> np.ndarray:
    spectrum, _ = _gaussian_state(h, data.shape)
    return np.fft.ifft2(np.fft.fft2(data) * spectrum)


def denoise(h: DenoiserHandle, r: ComplexImage, tau: float) -> ComplexImage:
    """Apply the denoiser at noise variance ``tau``. Exactly one call is
    accounted per invocation (``h.calls``)."""
    if not (tau > 0):
        raise ValueError("tau must be positive")
    h.calls += 1
    if h.kind == "wavelet_soft":
        thr = h.params["lam"] * math.sqrt(tau)
        wav = h.params.get("wavelet", DEFAULT_WAVELET)
        coeffs = wavelet2(r.data, h.params["levels"], wav)
        out = iwavelet2(soft_threshold(coeffs, thr), h.params["levels"], wav)
    elif h.kind == "gaussian_smooth":
        if h.complex_policy == "magnitude_phase":
            mag = np.abs(r.data)
            out = _smooth(h, mag).real * np.exp(1j * np.angle(r.data))
        else:
            out = _smooth(h, r.data)
    elif h.kind == "linear_test":
        mat = h.params["matrix"]
        if mat.shape[0] != r.size:
            raise ValueError("linear_test matrix does not match image size")
        out = (mat @ r.data.ravel()).reshape(r.shape)
    elif h.kind == "external":
        out = _external_denoise_via_handle(h, r, tau)
    else:
        raise ValueError(f"unknown denoiser kind {h.kind!r}")
    return ComplexImage(out)


def exact_divergence(h: DenoiserHandle, r: ComplexImage, tau: float) -> float | None:
    """Closed-form normalized divergence, or None when only probing works."""
    if h.kind == "gaussian_smooth":
        _, center = _gaussian_state(h, r.shape)
        return center
    if h.kind == "linear_test":
        mat = h.params["matrix"]
        return float(np.trace(mat).real) / mat.shape[0]
    return None


@dataclass(frozen=True)
class DivergenceEstimate:
    """Normalized Jacobian-trace estimate from random probing."""

    alpha_bar: float
    probes: int
    epsilon: float
    seed: object = 0

    def __post_init__(self):
        if self.probes < 1:
            raise ValueError("need at least one probe")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")


def default_probe_step(r: ComplexImage) -> float:
    """Scale-relative finite-difference step, kept above float noise."""
    rms = float(np.linalg.norm(r.data)) / math.sqrt(r.size)
    return max(rms, 1e-5) / 1000.0


def mc_divergence(
    h: DenoiserHandle,
    r: ComplexImage,
    tau: float,
    epsilon: float | None = None,
    probes: int = 1,
    seed=0,
    fr: ComplexImage | None = None,
) -> DivergenceEstimate:
    """Estimate the normalized divergence with real Gaussian probes.

    Uses probes+1 denoiser calls (f(r) is computed once and reused); pass a
    precomputed ``fr`` to shave that one call off when the caller already
    denoised r.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    eps = default_probe_step(r) if epsilon is None else float(epsilon)
    if not (eps > 0):
        raise ValueError("epsilon must be positive")
    if fr is None:
        fr = denoise(h, r, tau)
    rng = np.random.default_rng(seed)
    n = r.size
    acc = 0.0
    for _ in range(probes):
        q = rng.standard_normal(r.shape)
        shifted = denoise(h, ComplexImage(r.data + eps * q), tau)
        acc += float(np.sum(q * (shifted.data - fr.data).real)) / eps
    return DivergenceEstimate(acc / (probes * n), probes, eps, seed)


# ---------------------------------------------------------------------------
# external-denoiser wire protocol
#
# Little-endian, one request per message, responses in order:
#   request:  'PPD1' | u32 height | u32 width | f64 tau
#             | height*width f64 real plane | height*width f64 imag plane
#   response: 'PPR1' | u8 status
#             status 0: two f64 planes as above
#             status 1: u32 msg_len | UTF-8 message

REQUEST_MAGIC = b"PPD1"
RESPONSE_MAGIC = b"PPR1"
_REQ_HEAD = struct.Struct("<4sIId")


class DenoiserUnavailableError(Exception):
    """Endpoint cannot be reached or stopped responding; retryable."""


class DenoiserProtocolError(Exception):
    """Peer violated the wire protocol (bad magic, truncation, bad status)."""


class DenoiserServerError(Exception):
    """Peer answered with an explicit failure status."""


def pack_request(r: ComplexImage, tau: float) -> bytes:
    planes = np.empty((2, r.size), dtype="<f8")
    planes[0] = r.data.real.ravel()
    planes[1] = r.data.imag.ravel()
    return _REQ_HEAD.pack(REQUEST_MAGIC, r.height, r.width, tau) + planes.tobytes()


class _StdioTransport:
    def __init__(self, command: str):
        try:
            self.proc = subprocess.Popen(
                shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as exc:
            raise DenoiserUnavailableError(f"cannot spawn {command!r}: {exc}") from exc
        self.sel = selectors.DefaultSelector()
        os.set_blocking(self.proc.stdout.fileno(), False)
        self.sel.register(self.proc.stdout, selectors.EVENT_READ)

    def send(self, payload: bytes) -> None:
        try:
            self.proc.stdin.write(payload)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise DenoiserUnavailableError(f"denoiser process gone: {exc}") from exc

    def recv_some(self, deadline: float) -> bytes:
        import time

        remaining = deadline - time.monotonic()
        if remaining <= 0 or not self.sel.select(remaining):
            raise DenoiserUnavailableError("timed out waiting for denoiser reply")
        chunk = self.proc.stdout.read(1 << 20)
        return chunk or b""

    def close(self) -> None:
        self.sel.close()
        for stream in (self.proc.stdin, self.proc.stdout):
            if stream:
                stream.close()
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


class _SocketTransport:
    def __init__(self, endpoint: str):
        _, host, port = endpoint.split(":")
        try:
            self.sock = socket.create_connection((host, int(port)), timeout=10.0)
        except OSError as exc:
            raise DenoiserUnavailableError(f"cannot connect to {endpoint}: {exc}") from exc

    def send(self, payload: bytes) -> None:
        try:
            self.sock.sendall(payload)
        except OSError as exc:
            raise DenoiserUnavailableError(f"denoiser socket gone: {exc}") from exc

    def recv_some(self, deadline: float) -> bytes:
        import time

        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise DenoiserUnavailableError("timed out waiting for denoiser reply")
        self.sock.settimeout(remaining)
        try:
            return self.sock.recv(1 << 20)
        except socket.timeout as exc:
            raise DenoiserUnavailableError("timed out waiting for denoiser reply") from exc

    def close(self) -> None:
        self.sock.close()


class ExternalDenoiserClient:
    """One connection to one external denoiser; requests strictly serial.

    Concurrent callers must hold distinct clients (one peer per worker).
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.timeout = timeout
        self._buf = b""
        if endpoint.startswith("tcp:"):
            self._transport = _SocketTransport(endpoint)
        else:
            self._transport = _StdioTransport(endpoint)

    def _read_exact(self, n: int, deadline: float, started: bool) -> bytes:
        while len(self._buf) < n:
            try:
                chunk = self._transport.recv_some(deadline)
            except DenoiserUnavailableError:
                self.close()  # stream position unknown; retry needs a new peer
                raise
            if not chunk:
                self.close()
                if started or self._buf:
                    raise DenoiserProtocolError("response truncated mid-message")
                raise DenoiserUnavailableError("denoiser closed the connection")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def denoise(self, r: ComplexImage, tau: float) -> ComplexImage:
        import time

        self._transport.send(pack_request(r, tau))
        deadline = time.monotonic() + self.timeout
        magic = self._read_exact(4, deadline, started=False)
        if magic != RESPONSE_MAGIC:
            self.close()
            raise DenoiserProtocolError(f"bad response magic {magic!r}")
        status = self._read_exact(1, deadline, started=True)[0]
        if status == 1:
            (msg_len,) = struct.unpack("<I", self._read_exact(4, deadline, True))
            msg = self._read_exact(msg_len, deadline, True).decode("utf-8", "replace")
            raise DenoiserServerError(msg)
        if status != 0:
            self.close()
            raise DenoiserProtocolError(f"unknown response status {status}")
        n = r.size
        raw = self._read_exact(16 * n, deadline, True)
        planes = np.frombuffer(raw, dtype="<f8").reshape(2, n)
        data = (planes[0] + 1j * planes[1]).reshape(r.shape)
        if not np.all(np.isfinite(data)):
            raise DenoiserServerError("non-finite samples in denoiser response")
        return ComplexImage(data)

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _external_denoise_via_handle(h: DenoiserHandle, r: ComplexImage, tau: float) -> np.ndarray:
    client = h.params.get("_client")
    if client is None:
        client = ExternalDenoiserClient(h.params["endpoint"], h.params["timeout"])
        h.params["_client"] = client
    try:
        if h.complex_policy == "magnitude_phase":
            mag = ComplexImage(np.abs(r.data).astype(np.complex128))
            out = client.denoise(mag, tau)
            return out.data.real * np.exp(1j * np.angle(r.data))
        return client.denoise(r, tau).data
    except DenoiserUnavailableError:
        h.params.pop("_client", None)  # next call respawns the peer
        raise


def close_denoiser(h: DenoiserHandle) -> None:
    """Shut down an external handle's connection (no-op for built-ins)."""
    client = h.params.pop("_client", None)
    if client is not None:
        client.close()


def external_denoise(endpoint: str, r: ComplexImage, tau: float, timeout: float = 30.0) -> ComplexImage:
    """One-shot request against an endpoint (spawns and tears down the peer)."""
    with ExternalDenoiserClient(endpoint, timeout) as client:
        return client.denoise(r, tau)
