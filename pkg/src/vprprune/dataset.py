"""Procedural place-recognition data.

A place is a fixed random field of oriented gratings and Gaussian blobs; a view
re-renders it with a small translation, contrast/brightness jitter and pixel noise.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"VPRT"
SPLITS = ("train", "database", "query")


@dataclass
class PlaceDataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    place_ids: np.ndarray  # (n,) int64
    split: np.ndarray  # (n,) str
    view_ids: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.images)
        if len(self.place_ids) != n or len(self.split) != n:
            raise ValueError("images, place_ids and split must have equal length")
        if self.view_ids is None:
            self.view_ids = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, tag: str) -> "PlaceDataset":
        m = self.split == tag
        return PlaceDataset(self.images[m], self.place_ids[m], self.split[m], self.view_ids[m])

    @property
    def places(self) -> np.ndarray:
        return np.unique(self.place_ids)


def _place_field(rng: np.random.Generator, channels: int, gratings: int = 3, blobs: int = 6):
    g = dict(
        freq=rng.uniform(2.0, 7.0, gratings),
        theta=rng.uniform(0, np.pi, gratings),
        phase=rng.uniform(0, 2 * np.pi, gratings),
        color=rng.uniform(-1, 1, (gratings, channels)),
    )
    b = dict(
        center=rng.uniform(-0.1, 1.1, (blobs, 2)),
        sigma=rng.uniform(0.05, 0.15, blobs),
        color=rng.uniform(-1, 1, (blobs, channels)),
    )
    return g, b


def _render(field, size: tuple[int, int], shift: tuple[float, float]) -> np.ndarray:
    g, b = field
    h, w = size
    v, u = np.meshgrid(np.arange(h) / h + shift[1], np.arange(w) / w + shift[0], indexing="ij")
    img = np.zeros((g["color"].shape[1], h, w))
    for f, th, ph, col in zip(g["freq"], g["theta"], g["phase"], g["color"]):
        wave = np.sin(2 * np.pi * f * (u * np.cos(th) + v * np.sin(th)) + ph)
        img += col[:, None, None] * wave
    for (cx, cy), s, col in zip(b["center"], b["sigma"], b["color"]):
        blob = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * s * s))
        img += 1.5 * col[:, None, None] * blob
    return 0.5 + 0.5 * np.tanh(0.6 * img)


def generate(places: int, views: int, image_size=(32, 32), seed: int = 0, channels: int = 3,
             noise: float = 0.05, max_shift: float = 0.1, aliasing: float = 0.3) -> PlaceDataset:
    if views < 2:
        raise ValueError(f"need at least 2 views per place, got {views}")
    if places < 1:
        raise ValueError("need at least one place")
    if noise > 0.05 or max_shift > 0.1:
        raise ValueError("noise must be <= 0.05 and max_shift <= 0.1")
    size = tuple(image_size)
    shared = _place_field(np.random.default_rng([seed, 2**31]), channels)
    imgs, ids, vids = [], [], []
    for p in range(places):
        field = _place_field(np.random.default_rng([seed, p]), channels)
        for v in range(views):
            rng = np.random.default_rng([seed, p, v + 1])
            shift = tuple(rng.uniform(-max_shift, max_shift, 2))
            # the shared layer stays put while the place moves: common structure aliases places
            base = (1 - aliasing) * _render(field, size, shift) + aliasing * _render(shared, size, (0.0, 0.0))
            contrast = rng.uniform(0.6, 1.4, (channels, 1, 1))
            bright = rng.uniform(-0.2, 0.2, (channels, 1, 1))
            img = (base - 0.5) * contrast + 0.5 + bright + rng.normal(0, noise, base.shape)
            imgs.append(np.clip(img, 0.0, 1.0))
            ids.append(p)
            vids.append(v)
    n = len(imgs)
    return PlaceDataset(np.stack(imgs).astype(np.float32), np.array(ids, dtype=np.int64),
                        np.full(n, "train", dtype=object), np.array(vids, dtype=np.int64))


def split(ds: PlaceDataset, db_views: int, query_views: int, seed: int = 0) -> PlaceDataset:
    """Tag views per place: ``db_views`` database, ``query_views`` query, rest train."""
    if db_views < 1 or query_views < 0:
        raise ValueError("need db_views >= 1 and query_views >= 0")
    tags = np.array(ds.split, dtype=object)
    for p in ds.places:
        idx = np.flatnonzero(ds.place_ids == p)
        if db_views + query_views > len(idx):
            raise ValueError(f"place {p} has {len(idx)} views, fewer than {db_views}+{query_views}")
        order = idx[np.random.default_rng([seed, int(p)]).permutation(len(idx))]
        tags[order] = "train"
        tags[order[:db_views]] = "database"
        tags[order[db_views : db_views + query_views]] = "query"
    return PlaceDataset(ds.images, ds.place_ids, tags, ds.view_ids)


# ---------------------------------------------------------------- binary export

def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad tensor magic {raw[:4]!r}")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    body = raw[8 + 4 * ndim :]
    if len(body) != 4 * int(np.prod(shape)):
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)


def export(ds: PlaceDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["filename", "place_id", "split", "view_id"])
        for i in range(len(ds)):
            name = f"img_{i:05d}.vprt"
            write_tensor(d / name, ds.images[i])
            wr.writerow([name, int(ds.place_ids[i]), ds.split[i], int(ds.view_ids[i])])
    return d / "manifest.csv"


def load(directory) -> PlaceDataset:
    d = Path(directory)
    manifest = d / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {d}")
    imgs, ids, tags, vids = [], [], [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] not in SPLITS:
                raise ValueError(f"unknown split {row['split']!r}")
            imgs.append(read_tensor(d / row["filename"]))
            ids.append(int(row["place_id"]))
            tags.append(row["split"])
            vids.append(int(row.get("view_id") or 0))
    if not imgs:
        raise ValueError(f"{manifest} lists no images")
    return PlaceDataset(np.stack(imgs), np.array(ids, dtype=np.int64), np.array(tags, dtype=object),
                        np.array(vids, dtype=np.int64))
