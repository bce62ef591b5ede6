"""Low-light image handling: a classical percentile-stretch + gamma enhancer,
gated by mean luma, plus an adapter contract for external learned enhancers.

Images are numpy arrays of shape (H, W, 3), RGB, float values in [0, 1].
"""

from __future__ import annotations

import io
import json
import subprocess
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import BackendError, ConfigError, ShapeError

ImageTensor = np.ndarray

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

ENHANCE_MODES = ("auto", "always", "never", "external")


def as_image_tensor(data) -> ImageTensor:
    """Validate and coerce to a float (H, W, 3) array in [0, 1]."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ShapeError(
            f"image values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def load_image(path) -> ImageTensor:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def save_image(img: ImageTensor, path) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def to_uint8(img: ImageTensor) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def encode_png(img: ImageTensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_image_payload(data: bytes) -> np.ndarray:
    """Decode a lossless image payload: PNG or a raw .npy array."""
    if data[:6] == b"\x93NUMPY":
        arr = np.load(io.BytesIO(data), allow_pickle=False)
        return np.asarray(arr, dtype=np.float64)
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as e:
        raise BackendError(f"backend returned an undecodable image payload: {e}")


def estimate_brightness(img: ImageTensor) -> float:
    """Mean luma (0.299 R + 0.587 G + 0.114 B) over all pixels."""
    arr = as_image_tensor(img)
    if arr.size == 0:
        return 0.0
    return float(np.mean(arr @ LUMA_WEIGHTS))


@dataclass(frozen=True)
class EnhancementConfig:
    brightness_threshold: float = 0.25
    gamma: float = 0.45
    clip_percentiles: tuple[float, float] = (1.0, 99.0)
    mode: str = "auto"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        lo, hi = self.clip_percentiles
        if not (0 <= lo < hi <= 100):
            raise ConfigError(f"clip_percentiles must satisfy 0 <= low < high <= 100, got {self.clip_percentiles}")
        if not 0 <= self.brightness_threshold <= 1:
            raise ConfigError(f"brightness_threshold must be in [0, 1], got {self.brightness_threshold}")
        if self.mode not in ENHANCE_MODES:
            raise ConfigError(f"mode must be one of {ENHANCE_MODES}, got {self.mode!r}")

    def canonical_dict(self) -> dict:
        return {
            "brightness_threshold": self.brightness_threshold,
            "gamma": self.gamma,
            "clip_percentiles": list(self.clip_percentiles),
            "mode": self.mode,
        }


def _stretch_and_gamma(img: ImageTensor, cfg: EnhancementConfig) -> ImageTensor:
    lo_p, hi_p = cfg.clip_percentiles
    out = np.empty_like(img)
    for c in range(3):
        ch = img[:, :, c]
        lo, hi = np.percentile(ch, [lo_p, hi_p])
        if hi - lo > 1e-12:
            out[:, :, c] = np.clip((ch - lo) / (hi - lo), 0.0, 1.0)
        else:
            out[:, :, c] = ch
    return np.clip(out**cfg.gamma, 0.0, 1.0)


def enhance(img: ImageTensor, cfg: EnhancementConfig) -> ImageTensor:
    """Brighten dark images; bright images pass through untouched in auto mode.

    The transfer curve (percentile clip, linear stretch, gamma) is monotone
    per channel, so pixel ordering is preserved.
    """
    arr = as_image_tensor(img)
    if cfg.mode == "never":
        return arr
    if cfg.mode == "external":
        raise ConfigError("mode 'external' requires an enhancer backend; use enhance_external")
    if cfg.mode == "auto" and estimate_brightness(arr) >= cfg.brightness_threshold:
        return arr
    return _stretch_and_gamma(arr, cfg)


class EnhancerBackend(ABC):
    """Contract for an out-of-process enhancer.

    The backend receives a lossless-encoded image (PNG) and returns one of
    identical dimensions, either PNG or raw .npy; ``value_range`` declares how
    returned sample values map onto [0, 1].
    """

    value_range: tuple[float, float] = (0.0, 255.0)

    @abstractmethod
    def enhance_bytes(self, png: bytes) -> bytes:
        """Return the enhanced image payload; raise BackendError on failure."""

    def fingerprint(self) -> str:
        """Stable identity string folded into pipeline cache keys."""
        return type(self).__name__


def enhance_external(img: ImageTensor, backend: EnhancerBackend) -> ImageTensor:
    """Run one image through an external enhancer and validate the result."""
    arr = as_image_tensor(img)
    payload = backend.enhance_bytes(encode_png(arr))
    decoded = decode_image_payload(payload)
    if decoded.shape != arr.shape:
        raise ShapeError(
            f"enhancer backend returned shape {decoded.shape}, expected {arr.shape}"
        )
    lo, hi = backend.value_range
    if hi <= lo:
        raise BackendError(f"backend declared an empty value range ({lo}, {hi})")
    return np.clip((decoded - lo) / (hi - lo), 0.0, 1.0)


def enhance_with_config(
    img: ImageTensor, cfg: EnhancementConfig, backend: EnhancerBackend | None = None
) -> ImageTensor:
    """Dispatch on cfg.mode; external mode requires a backend."""
    if cfg.mode == "external":
        if backend is None:
            raise ConfigError("enhancement mode 'external' but no backend configured")
        return enhance_external(img, backend)
    return enhance(img, cfg)


class SubprocessEnhancer(EnhancerBackend):
    """Enhancer spoken to over stdin/stdout.

    Protocol: ``argv + ["handshake"]`` prints a JSON object that may declare
    {"value_range": [lo, hi]}; ``argv + ["enhance"]`` reads a PNG on stdin and
    writes the enhanced payload (PNG or .npy) to stdout.
    """

    def __init__(self, argv: list[str], timeout_s: float = 30.0):
        self.argv = list(argv)
        self.timeout_s = timeout_s
        hs = _run_subprocess(self.argv + ["handshake"], b"", timeout_s)
        try:
            info = json.loads(hs.decode("utf-8")) if hs.strip() else {}
        except json.JSONDecodeError as e:
            raise BackendError(f"bad handshake from {self.argv}: {e}")
        self.value_range = tuple(info.get("value_range", (0.0, 255.0)))

    def enhance_bytes(self, png: bytes) -> bytes:
        return _run_subprocess(self.argv + ["enhance"], png, self.timeout_s)

    def fingerprint(self) -> str:
        return f"subprocess:{' '.join(self.argv)}"


class HTTPEnhancer(EnhancerBackend):
    """Enhancer behind an HTTP endpoint.

    GET  {url}/handshake -> JSON, may declare {"value_range": [lo, hi]}
    POST {url}/enhance   -> enhanced payload for the PNG request body
    """

    def __init__(self, url: str, timeout_s: float = 30.0):
        import requests

        self._requests = requests
        self.url = url.rstrip("/")
        self.timeout_s = timeout_s
        try:
            resp = requests.get(f"{self.url}/handshake", timeout=timeout_s)
            resp.raise_for_status()
            info = resp.json()
        except Exception as e:
            raise BackendError(f"enhancer handshake with {self.url} failed: {e}")
        self.value_range = tuple(info.get("value_range", (0.0, 255.0)))

    def enhance_bytes(self, png: bytes) -> bytes:
        try:
            resp = self._requests.post(
                f"{self.url}/enhance",
                data=png,
                headers={"Content-Type": "image/png"},
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
        except Exception as e:
            raise BackendError(f"enhancer call to {self.url} failed: {e}")
        return resp.content

    def fingerprint(self) -> str:
        return f"http:{self.url}"


def _run_subprocess(argv: list[str], stdin: bytes, timeout_s: float) -> bytes:
    try:
        proc = subprocess.run(
            argv, input=stdin, capture_output=True, timeout=timeout_s
        )
    except FileNotFoundError as e:
        raise BackendError(f"backend command not found: {e}")
    except subprocess.TimeoutExpired:
        raise BackendError(f"backend {argv[0]} timed out after {timeout_s}s")
    if proc.returncode != 0:
        tail = proc.stderr.decode("utf-8", "replace")[-400:]
        raise BackendError(f"backend {argv[0]} exited {proc.returncode}: {tail}")
    return proc.stdout
