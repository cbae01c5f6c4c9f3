"""HTTP clients for full-scale model services (tracker, segmenter, flow).

Each adapter implements the same interface as its desk-scale oracle
counterpart, posting JSON arrays to an external endpoint. Failures follow a
retry-once policy; a second failure surfaces as the module-appropriate
error. These are the pluggable slots for pretrained point-tracking,
video-object-segmentation, promptable-segmentation, and optical-flow models.
"""

from __future__ import annotations

import numpy as np
import httpx

from .codec import VideoFrames
from .errors import MetricError, PropagationError
from .metrics import FlowField

DEFAULT_TIMEOUT = 30.0


class RemoteClient:
    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT,
                 transport: httpx.BaseTransport | None = None):
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        last_error: Exception | None = None
        for _ in range(2):  # retry once
            try:
                response = self._client.post(path, json=payload)
                response.raise_for_status()
                return response.json()
            except (httpx.HTTPError, ValueError) as exc:
                last_error = exc
        raise ConnectionError(f"remote call {self.base_url}{path} failed twice: {last_error}")


class RemotePointTracker(RemoteClient):
    def track(self, video: VideoFrames, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        try:
            result = self._post("/track_points", {
                "frames": video.as_uint8().tolist(),
                "fps": video.fps,
                "points": np.asarray(points, dtype=float).tolist(),
            })
            return np.asarray(result["positions"], dtype=np.float64), np.asarray(result["valid"], dtype=bool)
        except (ConnectionError, KeyError) as exc:
            raise PropagationError(f"remote point tracker failed: {exc}") from exc


class RemoteSegmenter(RemoteClient):
    def segment(self, frame: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> np.ndarray:
        try:
            result = self._post("/segment", {
                "frame": np.clip(np.rint(frame), 0, 255).astype(int).tolist(),
                "positive": np.asarray(positive, dtype=float).tolist(),
                "negative": np.asarray(negative, dtype=float).tolist(),
            })
            return np.asarray(result["mask"], dtype=bool)
        except (ConnectionError, KeyError) as exc:
            raise PropagationError(f"remote segmenter failed: {exc}") from exc


class RemoteMaskTracker(RemoteClient):
    def track_mask(self, video: VideoFrames, first_mask: np.ndarray,
                   seeds: np.ndarray | None = None) -> np.ndarray:
        try:
            payload = {
                "frames": video.as_uint8().tolist(),
                "mask": first_mask.astype(int).tolist(),
            }
            if seeds is not None:
                payload["seeds"] = np.asarray(seeds, dtype=float).tolist()
            result = self._post("/track_mask", payload)
            return np.asarray(result["masks"], dtype=bool)
        except (ConnectionError, KeyError) as exc:
            raise PropagationError(f"remote mask tracker failed: {exc}") from exc


class RemoteFlowEstimator(RemoteClient):
    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray) -> FlowField:
        try:
            result = self._post("/flow", {
                "frame_a": np.clip(np.rint(frame_a), 0, 255).astype(int).tolist(),
                "frame_b": np.clip(np.rint(frame_b), 0, 255).astype(int).tolist(),
            })
            return FlowField(np.asarray(result["dx"], dtype=np.float64),
                             np.asarray(result["dy"], dtype=np.float64))
        except (ConnectionError, KeyError) as exc:
            raise MetricError(f"remote flow estimator failed: {exc}") from exc
