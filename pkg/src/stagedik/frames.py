"""Observation containers: 3D marker targets and per-camera 2D detections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MarkerFrame:
    """3D target positions (meters) and non-negative confidences, keyed by site name."""

    targets: dict[str, np.ndarray]
    confidences: dict[str, float] = None
    frame_id: str = "0"

    def __post_init__(self):
        self.targets = {k: np.asarray(v, dtype=float).reshape(3) for k, v in self.targets.items()}
        if self.confidences is None:
            self.confidences = {k: 1.0 for k in self.targets}
        self.confidences = {k: float(v) for k, v in self.confidences.items()}
        missing = set(self.targets) - set(self.confidences)
        if missing:
            raise ValueError(f"targets without confidence: {sorted(missing)}")
        for k, w in self.confidences.items():
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"confidence of {k!r} must be finite and >= 0, got {w}")

    @property
    def sites(self):
        return list(self.targets)

    def centroid(self, sites=None):
        names = [s for s in (sites or self.targets) if self.confidences.get(s, 0.0) > 0]
        if not names:
            return None
        return np.mean([self.targets[s] for s in names], axis=0)


@dataclass
class MultiviewFrame:
    """2D detections (pixels) with confidences, keyed by camera id then site name."""

    detections: dict[str, dict[str, np.ndarray]]
    confidences: dict[str, dict[str, float]] = None
    frame_id: str = "0"
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.detections = {
            c: {k: np.asarray(v, dtype=float).reshape(2) for k, v in d.items()}
            for c, d in self.detections.items()
        }
        if self.confidences is None:
            self.confidences = {c: {k: 1.0 for k in d} for c, d in self.detections.items()}
        self.confidences = {c: {k: float(v) for k, v in d.items()}
                            for c, d in self.confidences.items()}
        for c, d in self.detections.items():
            conf = self.confidences.get(c, {})
            for k in d:
                w = conf.get(k)
                if w is None:
                    raise ValueError(f"detection {c}/{k} has no confidence")
                if not np.isfinite(w) or w < 0:
                    raise ValueError(f"confidence of {c}/{k} must be finite and >= 0, got {w}")

    @property
    def cameras(self):
        return list(self.detections)

    @property
    def sites(self):
        seen = {}
        for d in self.detections.values():
            for k in d:
                seen.setdefault(k, None)
        return list(seen)

    def pairs(self):
        """Iterate (camera, site, uv, confidence)."""
        for c, d in self.detections.items():
            for k, uv in d.items():
                yield c, k, uv, self.confidences[c][k]

    def for_site(self, site):
        """{camera: (uv, confidence)} for one site."""
        return {c: (d[site], self.confidences[c][site])
                for c, d in self.detections.items() if site in d}

    def subset(self, cameras):
        cams = [c for c in self.detections if c in set(cameras)]
        return MultiviewFrame({c: self.detections[c] for c in cams},
                              {c: self.confidences[c] for c in cams}, self.frame_id)

    def with_confidences(self, confidences):
        return MultiviewFrame(self.detections, confidences, self.frame_id, dict(self.flags))
