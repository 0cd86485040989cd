"""Synthetic reasoning-segmentation benchmark.

Scenes of moving circles, squares and triangles are rendered with depth
occlusion. Each episode carries an implicit query (a riddle about colour,
shape, motion, size or contact), the ground-truth tracklets of every instance,
and a multiple-choice question built from the same predicate.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decoder import MaskTracklet
from .encoder import VideoClip
from .errors import ConfigError, FormatError, GenerationError

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
PAPER_RATIOS = (1000 / 1934, 400 / 1934, 534 / 1934)

KINDS = ("circle", "square", "triangle")
PALETTE = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.35, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "purple": (0.60, 0.20, 0.80),
    "orange": (1.00, 0.55, 0.10),
}
RIDDLES = {
    "red": "tomato",
    "green": "grass",
    "blue": "sky",
    "yellow": "lemon",
    "purple": "plum",
    "orange": "pumpkin",
}
CORNERS = {"circle": "no", "square": "four", "triangle": "three"}
FILL_RATIO = {"circle": math.pi / 4, "square": 1.0, "triangle": 0.5}
NOT_SURE = "not sure"
BACKGROUND = 0.1
FAMILIES = ("color", "shape", "motion", "size", "relation")
DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "top": (0, -1), "bottom": (0, 1)}

QUERY_WORDS = sorted(
    {"find", "the", "thing", "colored", "like", "with", "corners", "heading", "to",
     "edge", "fastest", "slowest", "biggest", "smallest", "that", "never", "touches",
     "another"}
    | set(RIDDLES.values()) | set(CORNERS.values()) | set(DIRECTIONS)
)
ANSWER_WORDS = ["the", "is", *PALETTE, *KINDS]


@dataclass
class GeneratorConfig:
    height: int = 64
    width: int = 64
    frames: int = 8
    min_instances: int = 2
    max_instances: int = 3
    min_size: float = 6.0
    max_size: float = 11.0
    max_speed: float = 3.0
    families: tuple[str, ...] = ("color", "shape")
    min_visible: int = 12
    max_retries: int = 200
    fps: float = 8.0

    def validate(self):
        if not 2 <= self.min_instances <= self.max_instances <= 5:
            raise ConfigError("instance count must satisfy 2 <= min <= max <= 5")
        if self.frames < 4:
            raise ConfigError("need at least 4 frames")
        if not self.families or any(f not in FAMILIES for f in self.families):
            raise ConfigError(f"families must be a non-empty subset of {FAMILIES}")
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError("invalid size range")
        if self.max_instances > len(PALETTE):
            raise ConfigError("more instances than palette colours")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Instance:
    id: int
    kind: str
    size: float
    color: str
    depth: int
    trajectory: str  # "linear" | "circular"
    start: tuple[float, float] = (0.0, 0.0)
    velocity: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    omega: float = 0.0
    phase: float = 0.0

    def position(self, t: int) -> tuple[float, float]:
        if self.trajectory == "linear":
            return (self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t)
        a = self.phase + self.omega * t
        return (self.center[0] + self.radius * math.cos(a), self.center[1] + self.radius * math.sin(a))


@dataclass
class SceneSpec:
    instances: list[Instance]
    height: int
    width: int
    frames: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        insts = []
        for i in d["instances"]:
            i = dict(i)
            for k in ("start", "velocity", "center"):
                i[k] = tuple(i[k])
            insts.append(Instance(**i))
        return cls(instances=insts, height=d["height"], width=d["width"], frames=d["frames"])


@dataclass
class MultipleChoice:
    question: str
    options: list[str]
    key: int
    attribute: str  # "shape" | "color"


@dataclass
class QueryEpisode:
    id: str
    clip: VideoClip
    query: str
    target_ids: list[int]
    tracklets: dict[int, MaskTracklet]
    mc: MultipleChoice
    scene: SceneSpec
    family: str
    answer: list[str] = field(default_factory=list)

    def target_tracklets(self) -> list[MaskTracklet]:
        return [self.tracklets[i] for i in self.target_ids]

    def query_tokens(self) -> list[str]:
        return self.query.split()


# ---------------------------------------------------------------- rendering

def raster(inst: Instance, t: int, height: int, width: int) -> np.ndarray:
    cx, cy = inst.position(t)
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    s = inst.size
    if inst.kind == "circle":
        return dx * dx + dy * dy <= s * s
    if inst.kind == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if inst.kind == "triangle":
        # apex up: (0, -s), (-s, s), (s, s) relative to the centre
        below_apex_left = 2 * s * dx + s * dy + s * s >= 0
        below_apex_right = -2 * s * dx + s * dy + s * s >= 0
        above_base = dy <= s
        return below_apex_left & below_apex_right & above_base
    raise ConfigError(f"unknown shape kind {inst.kind!r}")


def render_scene(scene: SceneSpec) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Frames (float32 values) and visible masks per instance id, nearest depth wins."""
    t_n, h, w = scene.frames, scene.height, scene.width
    frames = np.full((t_n, h, w, 3), BACKGROUND, dtype=np.float32)
    visible = {inst.id: np.zeros((t_n, h, w), dtype=bool) for inst in scene.instances}
    order = sorted(scene.instances, key=lambda i: i.depth)
    for t in range(t_n):
        owner = np.full((h, w), -1)
        for inst in order:
            m = raster(inst, t, h, w)
            owner[m] = inst.id
            frames[t][m] = np.asarray(PALETTE[inst.color], dtype=np.float32)
        for inst in scene.instances:
            visible[inst.id][t] = owner == inst.id
    return frames, visible


# ---------------------------------------------------------------- scenes

def _sample_instance(rng: np.random.Generator, idx: int, kind: str, color: str, depth: int, cfg: GeneratorConfig) -> Instance:
    size = float(rng.uniform(cfg.min_size, cfg.max_size))
    span = cfg.frames - 1
    lo_x, hi_x = size, cfg.width - size
    lo_y, hi_y = size, cfg.height - size
    if rng.random() < 0.7:
        for _ in range(100):
            start = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
            vel = tuple(float(v) for v in rng.uniform(-cfg.max_speed, cfg.max_speed, size=2))
            end = (start[0] + vel[0] * span, start[1] + vel[1] * span)
            if lo_x <= end[0] <= hi_x and lo_y <= end[1] <= hi_y:
                return Instance(idx, kind, size, color, depth, "linear", start=start, velocity=vel)
        return Instance(idx, kind, size, color, depth, "linear", start=start, velocity=(0.0, 0.0))
    radius = float(rng.uniform(3.0, 10.0))
    center = (float(rng.uniform(lo_x + radius, hi_x - radius)), float(rng.uniform(lo_y + radius, hi_y - radius)))
    omega = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.4))
    phase = float(rng.uniform(0, 2 * math.pi))
    return Instance(idx, kind, size, color, depth, "circular", center=center, radius=radius, omega=omega, phase=phase)


def sample_scene(rng: np.random.Generator, cfg: GeneratorConfig) -> SceneSpec:
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    colors = rng.permutation(list(PALETTE))[:n]
    if n <= len(KINDS):
        kinds = rng.permutation(list(KINDS))[:n]
    else:
        kinds = rng.choice(list(KINDS), size=n)
    depths = rng.permutation(n)
    insts = [_sample_instance(rng, i, str(kinds[i]), str(colors[i]), int(depths[i]), cfg) for i in range(n)]
    return SceneSpec(instances=insts, height=cfg.height, width=cfg.width, frames=cfg.frames)


# ---------------------------------------------------------------- predicates

def displacement(inst: Instance, frames: int) -> tuple[float, float]:
    a, b = inst.position(0), inst.position(frames - 1)
    return b[0] - a[0], b[1] - a[1]


def speed(inst: Instance, frames: int) -> float:
    pts = [inst.position(t) for t in range(frames)]
    return float(np.mean([math.dist(p, q) for p, q in zip(pts, pts[1:])]))


def _argextreme(values: dict[int, float], margin: float, largest: bool = True) -> Optional[int]:
    ranked = sorted(values.items(), key=lambda kv: kv[1], reverse=largest)
    if len(ranked) < 2 or abs(ranked[0][1] - ranked[1][1]) < margin:
        return None
    return ranked[0][0]


def evaluate_predicate(scene: SceneSpec, family: str, arg: str) -> list[int]:
    """Instance ids satisfying the query predicate ``(family, arg)``."""
    insts = scene.instances
    if family == "color":
        return [i.id for i in insts if RIDDLES[i.color] == arg]
    if family == "shape":
        return [i.id for i in insts if CORNERS[i.kind] == arg]
    if family == "motion":
        if arg in ("fastest", "slowest"):
            sp = {i.id: speed(i, scene.frames) for i in insts}
            best = _argextreme(sp, 0.5, largest=arg == "fastest")
        else:
            ux, uy = DIRECTIONS[arg]
            proj = {i.id: ux * d[0] + uy * d[1] for i in insts for d in [displacement(i, scene.frames)]}
            best = _argextreme(proj, 4.0)
            if best is not None and proj[best] < 4.0:
                best = None
        return [] if best is None else [best]
    if family == "size":
        best = _argextreme({i.id: i.size for i in insts}, 1.5, largest=arg == "biggest")
        return [] if best is None else [best]
    if family == "relation":
        raws = {i.id: np.stack([raster(i, t, scene.height, scene.width) for t in range(scene.frames)]) for i in insts}
        alone = []
        for i in insts:
            others = np.zeros_like(raws[i.id])
            for j in insts:
                if j.id != i.id:
                    others |= raws[j.id]
            if not (raws[i.id] & others).any():
                alone.append(i.id)
        return alone
    raise ConfigError(f"unknown family {family!r}")


def query_text(family: str, arg: str) -> str:
    if family == "color":
        return f"find the thing colored like {arg}"
    if family == "shape":
        return f"find the thing with {arg} corners"
    if family == "motion":
        if arg in ("fastest", "slowest"):
            return f"find the {arg} thing"
        return f"find the thing heading to the {arg} edge"
    if family == "size":
        return f"find the {arg} thing"
    if family == "relation":
        return "find the thing that never touches another"
    raise ConfigError(f"unknown family {family!r}")


def _candidate_args(scene: SceneSpec, family: str) -> list[str]:
    if family == "color":
        return sorted(RIDDLES[i.color] for i in scene.instances)
    if family == "shape":
        return sorted({CORNERS[i.kind] for i in scene.instances})
    if family == "motion":
        return ["fastest", "slowest", *DIRECTIONS]
    if family == "size":
        return ["biggest", "smallest"]
    return ["alone"]


# ---------------------------------------------------------------- multiple choice

def build_mc(rng: np.random.Generator, scene: SceneSpec, family: str, query: str, target: Instance) -> MultipleChoice:
    attribute = "color" if family == "shape" else "shape"
    values = list(PALETTE) if attribute == "color" else list(KINDS)
    correct = getattr(target, "color" if attribute == "color" else "kind")
    in_scene = [getattr(i, "color" if attribute == "color" else "kind") for i in scene.instances if i.id != target.id]
    in_scene = list(dict.fromkeys(v for v in in_scene if v != correct))
    others = [v for v in values if v != correct and v not in in_scene]
    pool = [*rng.permutation(in_scene).tolist(), *rng.permutation(others).tolist()]
    cands = 1 + len(pool) + 1
    k = int(rng.integers(3, min(5, cands) + 1))
    # the not-sure choice is always offered, the rest prefer scene distractors
    options = [correct, NOT_SURE, *pool[: k - 2]]
    options = [options[i] for i in rng.permutation(len(options))]
    lengths = [len(o) for o in options]
    if max(lengths) - min(lengths) > 5:
        raise GenerationError(f"options not length-balanced: {options}")
    question = f"what {attribute} is " + query.removeprefix("find ")
    return MultipleChoice(question=question, options=options, key=options.index(correct), attribute=attribute)


def estimate_attribute(frames: np.ndarray, masks: np.ndarray, attribute: str) -> Optional[str]:
    """Colour or shape of a predicted tracklet, read off the pixels it covers."""
    if not masks.any():
        return None
    # the palette colour most pixels under the mask carry; a loose mask is
    # then tightened to the object it mostly covers
    pix = frames[masks]
    counts = {c: int((np.abs(pix - np.asarray(v)).max(axis=-1) < 0.05).sum()) for c, v in PALETTE.items()}
    dominant = max(PALETTE, key=lambda c: (counts[c], -list(PALETTE).index(c)))
    if attribute == "color":
        if counts[dominant]:
            return dominant
        rgb = pix.mean(axis=0)
        return min(PALETTE, key=lambda c: float(np.sum((rgb - np.asarray(PALETTE[c])) ** 2)))
    if counts[dominant]:
        masks = masks & (np.abs(frames - np.asarray(PALETTE[dominant])).max(axis=-1) < 0.05)
    ratios = []
    for m in masks:
        if m.sum() < 4:
            continue
        ys, xs = np.nonzero(m)
        box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        ratios.append(m.sum() / box)
    if not ratios:
        return None
    r = float(np.median(ratios))
    return min(KINDS, key=lambda k: abs(FILL_RATIO[k] - r))


def choose_option(mc: MultipleChoice, frames: np.ndarray, masks: Optional[np.ndarray]) -> int:
    """Option whose attribute matches the given tracklet; "not sure" when nothing is predicted."""
    value = None if masks is None else estimate_attribute(frames, masks, mc.attribute)
    if value in mc.options:
        return mc.options.index(value)
    if value is not None:
        # the estimated value was not offered: take the nearest offered value
        offered = [o for o in mc.options if o != NOT_SURE]
        if mc.attribute == "color":
            ref = np.asarray(PALETTE[value])
            best = min(offered, key=lambda c: float(np.sum((ref - np.asarray(PALETTE[c])) ** 2)))
        else:
            best = min(offered, key=lambda k: abs(FILL_RATIO[k] - FILL_RATIO[value]))
        return mc.options.index(best)
    return mc.options.index(NOT_SURE) if NOT_SURE in mc.options else 0


# ---------------------------------------------------------------- episodes

def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_episode(seed: int, cfg: GeneratorConfig, index: int = 0, episode_id: Optional[str] = None) -> QueryEpisode:
    cfg.validate()
    rng = episode_rng(seed, index)
    for _ in range(cfg.max_retries):
        scene = sample_scene(rng, cfg)
        family = str(rng.choice(list(cfg.families)))
        arg = str(rng.choice(_candidate_args(scene, family)))
        targets = evaluate_predicate(scene, family, arg)
        if len(targets) != 1:
            continue
        frames, visible = render_scene(scene)
        if visible[targets[0]].reshape(cfg.frames, -1).sum(axis=1).min() < cfg.min_visible:
            continue
        query = query_text(family, arg)
        target = next(i for i in scene.instances if i.id == targets[0])
        try:
            mc = build_mc(rng, scene, family, query, target)
        except GenerationError:
            continue
        eid = episode_id or f"ep{index:05d}"
        tracks = {i: MaskTracklet(masks=m, confidence=1.0, token_index=i) for i, m in visible.items()}
        return QueryEpisode(
            id=eid,
            clip=VideoClip(frames=frames.astype(np.float64), fps=cfg.fps, id=eid),
            query=query,
            target_ids=targets,
            tracklets=tracks,
            mc=mc,
            scene=scene,
            family=family,
            answer=["the", target.color, target.kind, "is"],
        )
    raise GenerationError(f"no valid episode after {cfg.max_retries} attempts (seed {seed}, index {index})")


def generate_episodes(seed: int, cfg: GeneratorConfig, count: int) -> list[QueryEpisode]:
    return [generate_episode(seed, cfg, index=i) for i in range(count)]


# ---------------------------------------------------------------- splits

@dataclass
class DatasetManifest:
    version: int
    splits: dict[str, list[str]]
    files: dict[str, dict[str, str]] = field(default_factory=dict)
    generator_seed: int = 0
    config_digest: str = ""
    generator: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * ratios``; ties go to the earlier split."""
    quotas = [n * r for r in ratios]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(ids: Sequence[str], ratios: Sequence[float] = PAPER_RATIOS, seed: int = 0) -> DatasetManifest:
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 3 non-negative values summing to 1, got {ratios}")
    active = sum(1 for r in ratios if r > 0)
    if len(ids) < active:
        raise ConfigError(f"{len(ids)} episodes cannot fill {active} splits")
    counts = apportion(len(ids), ratios)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    splits, pos = {}, 0
    for name, c in zip(SPLITS, counts):
        splits[name] = sorted(shuffled[pos : pos + c])
        pos += c
    return DatasetManifest(version=FORMAT_VERSION, splits=splits, generator_seed=seed)


# ---------------------------------------------------------------- RLE + files

def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, starting with a (possibly empty) background run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat[0] else runs


def decode_rle(counts: Sequence[int], height: int, width: int, path: str = "<memory>") -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != height * width or (counts < 0).any():
        raise FormatError(f"{path}: RLE counts sum to {int(counts.sum())}, expected {height * width}")
    values = np.arange(counts.size) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def _write_clip(path: Path, frames: np.ndarray):
    t, h, w, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", t, h, w))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def _read_clip(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read clip ({exc})") from None
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    t, h, w = struct.unpack_from("<3I", raw)
    body = np.frombuffer(raw, dtype="<f4", offset=12)
    if body.size != t * h * w * 3:
        raise FormatError(f"{path}: expected {t * h * w * 3} values, found {body.size}")
    return body.reshape(t, h, w, 3).astype(np.float64)


def _write_masks(path: Path, tracks: dict[int, MaskTracklet]):
    parts = [struct.pack("<I", len(tracks))]
    for iid in sorted(tracks):
        m = tracks[iid].masks
        t, h, w = m.shape
        parts.append(struct.pack("<4I", iid, t, h, w))
        for frame in m:
            counts = encode_rle(frame)
            parts.append(struct.pack(f"<{len(counts) + 1}I", len(counts), *counts))
    path.write_bytes(b"".join(parts))


def _read_masks(path: Path) -> dict[int, MaskTracklet]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read masks ({exc})") from None
    try:
        (n,), off = struct.unpack_from("<I", raw), 4
        out = {}
        for _ in range(n):
            iid, t, h, w = struct.unpack_from("<4I", raw, off)
            off += 16
            frames = []
            for _ in range(t):
                (k,) = struct.unpack_from("<I", raw, off)
                counts = struct.unpack_from(f"<{k}I", raw, off + 4)
                off += 4 + 4 * k
                frames.append(decode_rle(counts, h, w, str(path)))
            out[iid] = MaskTracklet(masks=np.stack(frames), confidence=1.0, token_index=iid)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated mask file ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def episode_files(eid: str) -> dict[str, str]:
    base = f"episodes/{eid}"
    return {"clip": f"{base}/clip.bin", "masks": f"{base}/masks.rle", "query": f"{base}/query.json"}


def write_episode(root: Path, ep: QueryEpisode) -> dict[str, str]:
    files = episode_files(ep.id)
    (root / files["clip"]).parent.mkdir(parents=True, exist_ok=True)
    _write_clip(root / files["clip"], ep.clip.frames)
    _write_masks(root / files["masks"], ep.tracklets)
    meta = {
        "id": ep.id,
        "fps": ep.clip.fps,
        "query": ep.query,
        "target_ids": ep.target_ids,
        "family": ep.family,
        "answer": ep.answer,
        "mc": asdict(ep.mc),
        "scene": ep.scene.to_json(),
    }
    (root / files["query"]).write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    return files


def read_episode(root: Path, eid: str, files: Optional[dict[str, str]] = None) -> QueryEpisode:
    files = files or episode_files(eid)
    qpath = root / files["query"]
    try:
        meta = json.loads(qpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{qpath}: {exc}") from None
    frames = _read_clip(root / files["clip"])
    tracks = _read_masks(root / files["masks"])
    return QueryEpisode(
        id=meta["id"],
        clip=VideoClip(frames=frames, fps=meta["fps"], id=meta["id"]),
        query=meta["query"],
        target_ids=list(meta["target_ids"]),
        tracklets=tracks,
        mc=MultipleChoice(**meta["mc"]),
        scene=SceneSpec.from_json(meta["scene"]),
        family=meta["family"],
        answer=list(meta["answer"]),
    )


def write_manifest(manifest: DatasetManifest, episodes: Sequence[QueryEpisode], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = {ep.id: write_episode(root, ep) for ep in episodes}
    manifest.files = {k: files[k] for k in sorted(files)}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), sort_keys=True, indent=1, ensure_ascii=False), encoding="utf-8")
    return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: version {data.get('version')} != {FORMAT_VERSION}")
    manifest = DatasetManifest(**data)
    for eid, files in manifest.files.items():
        for f in files.values():
            if not (root / f).exists():
                raise FormatError(f"{root / f}: listed in manifest but missing")
    return manifest


def load_split(root, split: str, manifest: Optional[DatasetManifest] = None) -> list[QueryEpisode]:
    root = Path(root)
    manifest = manifest or load_manifest(root)
    if split not in manifest.splits:
        raise FormatError(f"{root}: no split {split!r}")
    return [read_episode(root, eid, manifest.files.get(eid)) for eid in manifest.splits[split]]
