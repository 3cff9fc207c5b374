"""On-disk layout for rendered pairs and datasets.

A pair directory holds::

    FORMAT                      "KPTRAIN-PAIR 1"
    camera_a.txt, camera_b.txt  "key = value" lines (repr floats, R row-major)
    {image,depth,valid,surface}_{a,b}.f32
                                H x W little-endian float32, row-major
    tracks.txt                  "KPTRAIN-TRACKS 1" then "x y z vis_a vis_b" per track
    pair.txt                    "key = value" metadata (overlap, seeds)

A dataset directory holds one sub-directory per pair plus ``manifest.json``
listing the train and test pairs and a SHA-256 checksum of every pair directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geometry import Camera, CameraView
from .scenegen import SamplingExhausted, SceneConfig, TrackSet, TwoViewPair, generate_scene, sample_pair

log = logging.getLogger(__name__)

PAIR_FORMAT = "KPTRAIN-PAIR 1"
TRACKS_FORMAT = "KPTRAIN-TRACKS 1"
MANIFEST_FORMAT = "KPTRAIN-DATASET 1"


def _write_grid(path: Path, grid):
    np.asarray(grid, dtype="<f4").tofile(path)


def _read_grid(path: Path, shape):
    return np.fromfile(path, dtype="<f4").reshape(shape)


def _write_kv(path: Path, items: dict):
    lines = []
    for k, v in items.items():
        if isinstance(v, (list, tuple, np.ndarray)):
            v = " ".join(repr(float(x)) for x in np.ravel(v))
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")


def _read_kv(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_camera(path: Path, cam: Camera):
    _write_kv(path, {"format": PAIR_FORMAT, "width": cam.width, "height": cam.height,
                     "fx": repr(float(cam.fx)), "fy": repr(float(cam.fy)), "cx": repr(float(cam.cx)), "cy": repr(float(cam.cy)),
                     "R": cam.R, "t": cam.t})


def read_camera(path: Path) -> Camera:
    kv = _read_kv(path)
    if kv.get("format") != PAIR_FORMAT:
        raise ValueError(f"{path}: unsupported camera format {kv.get('format')!r}")
    vec = lambda s: np.array([float(x) for x in s.split()])  # noqa: E731
    return Camera(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                  vec(kv["R"]).reshape(3, 3), vec(kv["t"]), int(kv["width"]), int(kv["height"]))


def save_pair(pair: TwoViewPair, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "FORMAT").write_text(PAIR_FORMAT + "\n")
    for tag, view in (("a", pair.view_a), ("b", pair.view_b)):
        write_camera(d / f"camera_{tag}.txt", view.camera)
        _write_grid(d / f"image_{tag}.f32", view.image)
        _write_grid(d / f"depth_{tag}.f32", view.depth)
        _write_grid(d / f"valid_{tag}.f32", view.valid)
        sid = view.surface_id if view.surface_id is not None else np.full(view.shape, -1)
        _write_grid(d / f"surface_{tag}.f32", sid)
    tr = pair.tracks
    lines = [TRACKS_FORMAT] + [
        f"{p[0]!r} {p[1]!r} {p[2]!r} {int(va)} {int(vb)}"
        for p, va, vb in zip(tr.points.tolist(), tr.visibility_a, tr.visibility_b)
    ]
    (d / "tracks.txt").write_text("\n".join(lines) + "\n")
    _write_kv(d / "pair.txt", {"overlap": repr(float(pair.overlap)), **{k: v for k, v in pair.meta.items()}})


def load_pair(directory) -> TwoViewPair:
    d = Path(directory)
    fmt = (d / "FORMAT").read_text().strip()
    if fmt != PAIR_FORMAT:
        raise ValueError(f"{d}: unsupported pair format {fmt!r}")
    views = []
    for tag in ("a", "b"):
        cam = read_camera(d / f"camera_{tag}.txt")
        shape = cam.shape
        views.append(CameraView(
            cam,
            _read_grid(d / f"image_{tag}.f32", shape).astype(np.float64),
            _read_grid(d / f"depth_{tag}.f32", shape).astype(np.float64),
            _read_grid(d / f"valid_{tag}.f32", shape) > 0.5,
            _read_grid(d / f"surface_{tag}.f32", shape).astype(np.int64),
        ))
    lines = (d / "tracks.txt").read_text().splitlines()
    if lines[0] != TRACKS_FORMAT:
        raise ValueError(f"{d}: unsupported tracks format {lines[0]!r}")
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    pts = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    vis_a = np.array([r[3] == "1" for r in rows], dtype=bool)
    vis_b = np.array([r[4] == "1" for r in rows], dtype=bool)
    meta = _read_kv(d / "pair.txt")
    overlap = float(meta.pop("overlap"))
    meta = {k: int(v) if v.lstrip("-").isdigit() else v for k, v in meta.items()}
    return TwoViewPair(views[0], views[1], TrackSet(pts, vis_a, vis_b), overlap, meta)


class PairDirectoryDataset:
    """Lazily loads pair directories listed for one split of a dataset manifest."""

    def __init__(self, root, split: str = "train", cache: bool = False):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.names = list(self.manifest[split])
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        pair = load_pair(self.root / self.names[i])
        if self._cache is not None:
            self._cache[i] = pair
        return pair


def generate_pairs(scene_config: SceneConfig, scene_seeds, pairs_per_scene: int,
                   min_overlap: float, max_overlap: float):
    """Yield ``(name, pair)``; scenes that cannot produce a pair in the band are skipped."""
    for s in scene_seeds:
        scene = generate_scene(scene_config, s)
        for j in range(pairs_per_scene):
            try:
                pair = sample_pair(scene, min_overlap, max_overlap, seed=int(s) * 1000 + j)
            except SamplingExhausted as e:
                log.warning("scene %d pair %d: %s", s, j, e)
                continue
            if len(pair.tracks) == 0:
                continue
            yield f"s{int(s):06d}_p{j:03d}", pair


def seed_ranges_overlap(a, b) -> bool:
    return max(a[0], b[0]) < min(a[1], b[1])


def pair_checksum(directory) -> str:
    """SHA-256 over the names and bytes of every file in a pair directory."""
    h = hashlib.sha256()
    for f in sorted(Path(directory).iterdir()):
        h.update(f.name.encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def verify_dataset(root) -> list:
    """Names of pairs whose on-disk content no longer matches the manifest."""
    root = Path(root)
    m = read_manifest(root)
    sums = m.get("checksums", {})
    return [n for n in m["train"] + m["test"] if not (root / n).is_dir() or pair_checksum(root / n) != sums.get(n)]


def generate_dataset(root, scene_config: SceneConfig, n_train: int, n_test: int,
                     train_seeds=(0, 10_000), test_seeds=(1_000_000, 1_010_000),
                     pairs_per_scene: int = 10, min_overlap: float = 0.35, max_overlap: float = 0.9,
                     extra: dict | None = None) -> dict:
    """Render ``n_train`` + ``n_test`` pairs from disjoint scene-seed ranges and write a manifest."""
    if seed_ranges_overlap(train_seeds, test_seeds):
        raise ValueError(f"train scene seeds {tuple(train_seeds)} overlap test scene seeds {tuple(test_seeds)}; "
                         "train and test scenes must be disjoint")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": MANIFEST_FORMAT, "scene_config": asdict(scene_config),
                "train_seeds": list(train_seeds), "test_seeds": list(test_seeds),
                "pairs_per_scene": pairs_per_scene, "min_overlap": min_overlap, "max_overlap": max_overlap,
                **(extra or {})}
    checksums = {}
    for split, n, seeds in (("train", n_train, train_seeds), ("test", n_test, test_seeds)):
        names = []
        if n > 0:
            for name, pair in generate_pairs(scene_config, range(*seeds), pairs_per_scene, min_overlap, max_overlap):
                save_pair(pair, root / name)
                checksums[name] = pair_checksum(root / name)
                names.append(name)
                if len(names) >= n:
                    break
        if len(names) < n:
            raise RuntimeError(f"seed range {seeds} produced only {len(names)} of {n} {split} pairs")
        manifest[split] = names
    manifest["checksums"] = checksums
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (root / "manifest.json").write_text(text + "\n")
    return manifest


def read_manifest(root) -> dict:
    m = json.loads((Path(root) / "manifest.json").read_text())
    if m.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{root}: not a dataset manifest")
    return m


def manifest_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()
