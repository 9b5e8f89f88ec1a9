"""Synthetic multi-organ phantoms with exact per-class masks.

Each class is one smooth closed blob (a superellipse whose radius carries a
few random Fourier harmonics). In ``symmetric_pair`` mode classes 0 and 1 are
mirror images across the vertical midline with identical intensity and
texture, so only their side tells them apart.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BASE_LOW, BASE_HIGH = 0.3, 0.8
MIN_AREA_FRAC, MAX_AREA_FRAC = 0.01, 0.40


@dataclass(frozen=True)
class PhantomConfig:
    H: int = 64
    W: int = 64
    num_classes: int = 4
    contrast: float = 1.0
    noise_std: float = 0.05
    symmetric_pair: bool = False
    seed: int = 0
    background: float = 0.1
    texture_amp: float = 0.04
    radius_frac: tuple[float, float] = (0.08, 0.17)

    def __post_init__(self):
        if self.H < 16 or self.W < 16:
            raise ValueError(f"H and W must be >= 16, got {self.H}x{self.W}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must lie in (0, 1], got {self.contrast}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.symmetric_pair and self.num_classes < 2:
            raise ValueError("symmetric_pair needs num_classes >= 2")
        if self.symmetric_pair and self.W % 2:
            raise ValueError("symmetric_pair needs an even width")

    def class_bases(self) -> np.ndarray:
        bases = np.linspace(BASE_LOW, BASE_HIGH, self.num_classes) if self.num_classes > 1 else np.array([BASE_HIGH])
        if self.symmetric_pair:
            bases[1] = bases[0]
        return bases

    def class_intensity(self, k: int) -> float:
        return self.background + self.contrast * (self.class_bases()[k] - self.background)


@dataclass
class PhantomSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    masks: np.ndarray  # [K, H, W] uint8 in {0, 1}
    class_ids: list[int]
    seed: int
    index: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def sample_id(self) -> str:
        return f"sample_{self.index:04d}"


class PlacementError(RuntimeError):
    pass


def _blob(rng: np.random.Generator, H: int, W: int, cy: float, cx: float, rmin: float, rmax: float) -> np.ndarray:
    a, b = rng.uniform(rmin, rmax, size=2)
    n = rng.uniform(1.6, 4.0)
    rot = rng.uniform(0, np.pi)
    harmonics = [(m, rng.uniform(0.0, 0.12), rng.uniform(0, 2 * np.pi)) for m in (2, 3, 4)]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx) - rot
    radius = (np.abs(np.cos(phi) / a) ** n + np.abs(np.sin(phi) / b) ** n) ** (-1.0 / n)
    for m, amp, phase in harmonics:
        radius = radius * (1.0 + amp * np.cos(m * phi + phase))
    return rho <= radius


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _area_ok(mask: np.ndarray, H: int, W: int) -> bool:
    area = int(mask.sum())
    return MIN_AREA_FRAC * H * W <= area <= MAX_AREA_FRAC * H * W


def _texture(rng: np.random.Generator, H: int, W: int, amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    field_ = np.zeros((H, W))
    for _ in range(3):
        fy, fx = rng.uniform(-3, 3, size=2)
        field_ += np.cos(2 * np.pi * (fy * yy / H + fx * xx / W) + rng.uniform(0, 2 * np.pi))
    return amp * field_ / 3.0


def _place_all(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    H, W, K = cfg.H, cfg.W, cfg.num_classes
    rmin, rmax = (f * min(H, W) for f in cfg.radius_frac)
    for _restart in range(50):
        masks = np.zeros((K, H, W), dtype=bool)
        taken = np.zeros((H, W), dtype=bool)
        ok = True
        start = 0
        if cfg.symmetric_pair:
            half = W // 2
            for _ in range(200):
                cy = rng.uniform(rmax, H - rmax)
                cx = rng.uniform(rmax, half - rmax)
                m = _blob(rng, H, W, cy, cx, rmin, rmax)
                # keep a two-pixel gap to the midline so the mirror stays disjoint
                if m[:, half - 1:].any() or m[0].any() or m[-1].any() or m[:, 0].any():
                    continue
                if _area_ok(m, H, W):
                    break
            else:
                ok = False
            if ok:
                masks[0] = m
                masks[1] = m[:, ::-1]
                taken = _dilate(masks[0] | masks[1])
                start = 2
        for k in range(start, K):
            if not ok:
                break
            for _ in range(200):
                cy = rng.uniform(rmin, H - rmin)
                cx = rng.uniform(rmin, W - rmin)
                m = _blob(rng, H, W, cy, cx, rmin, rmax)
                if _area_ok(m, H, W) and not (m & taken).any():
                    masks[k] = m
                    taken |= _dilate(m)
                    break
            else:
                ok = False
        if ok:
            return masks
    raise PlacementError(f"could not place {K} disjoint blobs on a {H}x{W} grid")


def generate_one(cfg: PhantomConfig, index: int) -> PhantomSample:
    """Sample ``index`` of the stream defined by ``cfg``; independent of other indices."""
    rng = np.random.default_rng([cfg.seed, index])
    H, W, K = cfg.H, cfg.W, cfg.num_classes
    masks = _place_all(cfg, rng)
    image = np.full((H, W), cfg.background, dtype=np.float64)
    tex = _texture(rng, H, W, cfg.texture_amp * cfg.contrast)
    for k in range(K):
        t = tex[:, ::-1] if (cfg.symmetric_pair and k == 1) else tex
        image[masks[k]] = cfg.class_intensity(k) + t[masks[k]]
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=(H, W))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return PhantomSample(
        image=np.repeat(image[None], 3, axis=0),
        masks=masks.astype(np.uint8),
        class_ids=[k for k in range(K) if masks[k].any()],
        seed=cfg.seed,
        index=index,
    )


def generate(cfg: PhantomConfig, n: int) -> list[PhantomSample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [generate_one(cfg, i) for i in range(n)]


def split(samples: list, train_frac: float) -> tuple[list, list]:
    """Order-stable split into a leading train part and a trailing eval part."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    n_train = int(round(len(samples) * train_frac))
    if n_train == 0 or n_train == len(samples):
        raise ValueError(f"split of {len(samples)} samples at {train_frac} leaves an empty side")
    return list(samples[:n_train]), list(samples[n_train:])


def dataset_hash(samples: list[PhantomSample]) -> str:
    import hashlib

    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.tobytes())
        h.update(s.masks.tobytes())
    return h.hexdigest()


# -- PGM (P5) io -----------------------------------------------------------------


def write_pgm(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("PGM export expects a 2-D uint8 array")
    H, W = arr.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1
    data = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=pos)
    return data.reshape(H, W).copy()


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def export(samples: list[PhantomSample], out_dir, cfg: PhantomConfig | None = None) -> Path:
    """Write images, masks and ``index.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img_rel = f"images/{s.sample_id}.pgm"
        write_pgm(out / img_rel, to_u8(s.image[0]))
        mask_files = {}
        for k in range(s.masks.shape[0]):
            rel = f"masks/{s.sample_id}_c{k}.pgm"
            write_pgm(out / rel, (s.masks[k] * 255).astype(np.uint8))
            mask_files[str(k)] = rel
        entries.append({
            "sample_id": s.sample_id,
            "class_ids": list(s.class_ids),
            "seed": s.seed,
            "files": {"image": img_rel, "masks": mask_files},
        })
    index = {"num_classes": int(samples[0].masks.shape[0]), "samples": entries}
    if cfg is not None:
        index["config"] = asdict(cfg)
    path = out / "index.json"
    path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return path


def load_dataset(data_dir) -> list[PhantomSample]:
    """Read an exported dataset back; images come back 8-bit quantized."""
    root = Path(data_dir)
    index = json.loads((root / "index.json").read_text())
    K = int(index["num_classes"])
    samples = []
    for i, e in enumerate(index["samples"]):
        img = read_pgm(root / e["files"]["image"]).astype(np.float32) / 255.0
        masks = np.stack([read_pgm(root / e["files"]["masks"][str(k)]) > 127 for k in range(K)]).astype(np.uint8)
        idx = int(e["sample_id"].rsplit("_", 1)[-1]) if e["sample_id"].startswith("sample_") else i
        samples.append(PhantomSample(
            image=np.repeat(img[None], 3, axis=0), masks=masks,
            class_ids=[int(c) for c in e["class_ids"]], seed=int(e.get("seed", 0)), index=idx,
        ))
    return samples
