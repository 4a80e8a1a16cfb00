"""Registry of the named superpixel configurations (single01-05, fuss01-06).

SLIC segment counts are stored as pixels-per-segment and resolved against
the image size when a segmenter is built.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ._validation import ValidationError
from .fusion import FussSegmenter
from .superpixels import ALGORITHMS, make_segmenter


@dataclass(frozen=True)
class SegmenterSpec:
    algorithm: str
    params: dict = field(default_factory=dict)
    pixels_per_segment: int | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown superpixel algorithm {self.algorithm!r}")

    def resolve(self, shape) -> dict:
        params = dict(self.params)
        if self.pixels_per_segment is not None:
            n_pixels = int(shape[0]) * int(shape[1])
            params["n_segments"] = max(1, int(round(n_pixels / self.pixels_per_segment)))
        return params

    def build(self, shape):
        return make_segmenter(self.algorithm, self.resolve(shape))

    def to_dict(self) -> dict:
        out = {"algorithm": self.algorithm, "params": dict(self.params)}
        if self.pixels_per_segment is not None:
            out["pixels_per_segment"] = self.pixels_per_segment
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SegmenterSpec":
        return cls(doc["algorithm"], dict(doc.get("params", {})), doc.get("pixels_per_segment"))


@dataclass(frozen=True)
class SuperpixelConfig:
    """One or two segmenters; two means they are fused."""

    name: str
    parts: tuple[SegmenterSpec, ...]
    min_size: int = 50
    stat: str = "mean"

    def __post_init__(self):
        if len(self.parts) not in (1, 2):
            raise ValidationError("a superpixel config holds one or two segmenters")

    @property
    def kind(self) -> str:
        return "fuss" if len(self.parts) == 2 else "single"

    def build(self, shape, min_size: int | None = None, stat: str | None = None):
        if self.kind == "single":
            return self.parts[0].build(shape)
        return FussSegmenter(self.parts[0].build(shape), self.parts[1].build(shape),
                             min_size=self.min_size if min_size is None else min_size,
                             stat=self.stat if stat is None else stat)

    def to_dict(self) -> dict:
        out = {"name": self.name, "parts": [p.to_dict() for p in self.parts]}
        if self.kind == "fuss":
            out.update(min_size=self.min_size, stat=self.stat)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SuperpixelConfig":
        parts = tuple(SegmenterSpec.from_dict(p) for p in doc["parts"])
        return cls(doc.get("name", "inline"), parts, doc.get("min_size", 50),
                   doc.get("stat", "mean"))


def _fz(scale, sigma, min_size):
    return SegmenterSpec("felzenszwalb", {"scale": scale, "sigma": sigma, "min_size": min_size})


def _slic(pixels_per_segment, compactness=5, sigma=1):
    return SegmenterSpec("slic", {"compactness": compactness, "sigma": sigma},
                         pixels_per_segment=pixels_per_segment)


def _qs(kernel_size, max_dist=50, ratio=0.5):
    return SegmenterSpec("quickshift",
                         {"kernel_size": kernel_size, "max_dist": max_dist, "ratio": ratio})


REGISTRY: dict[str, SuperpixelConfig] = {
    c.name: c
    for c in [
        SuperpixelConfig("single01", (_fz(100, 0.5, 50),)),
        SuperpixelConfig("single02", (_fz(200, 0.5, 50),)),
        SuperpixelConfig("single03", (_slic(350),)),
        SuperpixelConfig("single04", (_fz(50, 0.5, 50),)),
        SuperpixelConfig("single05", (_fz(100, 0.5, 100),)),
        SuperpixelConfig("fuss01", (_slic(2000), _fz(200, 0.7, 200))),
        SuperpixelConfig("fuss02", (_slic(1500), _fz(100, 0.7, 150))),
        SuperpixelConfig("fuss03", (_slic(1000), _fz(100, 0.7, 150))),
        SuperpixelConfig("fuss04", (_fz(200, 0.7, 200), _qs(5))),
        SuperpixelConfig("fuss05", (_fz(200, 0.7, 200), _qs(4))),
        SuperpixelConfig("fuss06", (_fz(200, 0.7, 200), _qs(3))),
    ]
}


def named_config(name: str) -> SuperpixelConfig:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ValidationError(
            f"unknown superpixel config {name!r}; known: {', '.join(REGISTRY)}") from None
