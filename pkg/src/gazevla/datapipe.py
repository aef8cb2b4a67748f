"""Rollout recording and the pairwise (full frame, gaze crop) training corpus.

On-disk layout (see README):
    <root>/manifest.json
    <root>/shards/shard-%05d.bin

A shard is a sequence of length-prefixed records, one per episode:
    u32 payload_len | u32 crc32(payload) | payload
    payload = u32 header_len | header JSON | blobs... | actions f32le
PNG blobs appear in the order declared by the header, so shards are
inspectable with nothing but a hex viewer and `png`.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from . import simworld as sw
from .common import atomic_write_text, canonical_json, mix64, read_json, sha256_bytes

SCHEMA_VERSION = 1
MANIFEST_VERSION = 1
CROP_SIZE = 32
MIN_BOX_AREA = 4


class DegenerateBox(Exception):
    """Gaze box too small to crop (should not occur given dilation)."""


class ChecksumMismatch(Exception):
    pass


class SchemaVersionUnsupported(Exception):
    pass


@dataclass(frozen=True)
class GazeBoxes:
    base: sw.BBox
    wrist: Optional[sw.BBox]


@dataclass
class Episode:
    """One recorded expert rollout; frame t pairs with action t (last frame has none)."""

    instruction: str
    base_frames: np.ndarray      # (T, 64, 64, 3) uint8
    wrist_frames: np.ndarray     # (T, 64, 64, 3) uint8
    actions: np.ndarray          # (T-1, 4) float32
    gaze_boxes: list[GazeBoxes]  # length T
    subtask_index: list[int]     # length T, non-decreasing
    env_id: str
    seed: int

    @property
    def n_frames(self) -> int:
        return int(self.base_frames.shape[0])

    def equals(self, other: "Episode") -> bool:
        return (
            self.instruction == other.instruction
            and np.array_equal(self.base_frames, other.base_frames)
            and np.array_equal(self.wrist_frames, other.wrist_frames)
            and np.array_equal(self.actions, other.actions)
            and self.gaze_boxes == other.gaze_boxes
            and self.subtask_index == other.subtask_index
            and self.env_id == other.env_id
            and self.seed == other.seed
        )


@dataclass
class AnnotatedEpisode:
    episode: Episode
    crops: np.ndarray  # (T, 32, 32, 3) uint8, resampled base-view gaze regions

    def equals(self, other: "AnnotatedEpisode") -> bool:
        return self.episode.equals(other.episode) and np.array_equal(self.crops, other.crops)


def validate_episode(ep: Episode) -> None:
    t = ep.n_frames
    assert ep.wrist_frames.shape[0] == t
    assert ep.actions.shape == (t - 1, 4)
    assert len(ep.gaze_boxes) == t and len(ep.subtask_index) == t
    assert all(b <= a for a, b in zip(ep.subtask_index[1:], ep.subtask_index)), "subtask_index decreased"


# ---------------------------------------------------------------------------
# collection


def collect_episode(seed: int, env_id: str, chain_length: int = 5,
                    max_steps_per_subtask: int = 60) -> Episode:
    """Record a closed-loop expert rollout frame by frame.

    Raises InfeasibleChain if no feasible task exists for the seed; the expert
    failing its own chain indicates a simulator bug and raises RuntimeError.
    """
    world, chain = sw.make_feasible_task(seed, env_id, chain_length)
    instruction = sw.instruction_for_chain(world, chain)

    base_frames, wrist_frames, boxes, sub_idx, actions = [], [], [], [], []

    def record(w: sw.WorldState, subtask: sw.Subtask, idx: int) -> None:
        base_frames.append(sw.render(w, "base"))
        wrist_frames.append(sw.render(w, "wrist"))
        try:
            wrist_box = sw.gaze_bbox(w, subtask, "wrist")
        except sw.ObjectOccluded:
            wrist_box = None
        boxes.append(GazeBoxes(base=sw.gaze_bbox(w, subtask, "base"), wrist=wrist_box))
        sub_idx.append(idx)

    for idx, subtask in enumerate(chain):
        subtask = sw.advance_subtask(world, subtask)
        steps = 0
        while subtask.phase != "done" and steps < max_steps_per_subtask:
            record(world, subtask, idx)
            a = sw.expert_action(world, subtask)
            actions.append(a.as_vector())
            world = sw.step(world, a)
            subtask = sw.advance_subtask(world, subtask)
            steps += 1
        if subtask.phase != "done":
            raise RuntimeError(f"expert failed subtask {idx} (seed={seed}, env={env_id})")

    # final frame: chain complete, gaze frozen at the last defined box
    base_frames.append(sw.render(world, "base"))
    wrist_frames.append(sw.render(world, "wrist"))
    boxes.append(boxes[-1])
    sub_idx.append(len(chain) - 1)

    ep = Episode(
        instruction=instruction,
        base_frames=np.stack(base_frames),
        wrist_frames=np.stack(wrist_frames),
        actions=np.stack(actions).astype(np.float32),
        gaze_boxes=boxes,
        subtask_index=sub_idx,
        env_id=env_id,
        seed=int(seed),
    )
    validate_episode(ep)
    return ep


def crop_and_resize(frame: np.ndarray, box: sw.BBox, out_size: int = CROP_SIZE) -> np.ndarray:
    """Deterministic bilinear resample of the boxed region to out_size^2.

    The one code path for producing gaze crops; integrity checks re-run it.
    """
    if box.area < MIN_BOX_AREA:
        raise DegenerateBox(f"box area {box.area} < {MIN_BOX_AREA}")
    region = frame[box.y_min:box.y_max, box.x_min:box.x_max]
    img = Image.fromarray(region).resize((out_size, out_size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def annotate_gaze(episode: Episode) -> AnnotatedEpisode:
    """Attach the 32x32 bilinear gaze crops (base view) as reconstruction targets."""
    crops = np.stack([
        crop_and_resize(frame, gb.base)
        for frame, gb in zip(episode.base_frames, episode.gaze_boxes)
    ])
    return AnnotatedEpisode(episode=episode, crops=crops)


# ---------------------------------------------------------------------------
# shard IO


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _png_decode(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.uint8)


def _box_json(b: Optional[sw.BBox]):
    return None if b is None else [b.x_min, b.y_min, b.x_max, b.y_max]


def _box_from_json(v) -> Optional[sw.BBox]:
    return None if v is None else sw.BBox(*v)


def _encode_record(annotated: AnnotatedEpisode) -> bytes:
    ep = annotated.episode
    blobs: list[bytes] = []
    names: list[dict] = []
    for i in range(ep.n_frames):
        for tag, arr in (("base", ep.base_frames[i]), ("wrist", ep.wrist_frames[i]),
                         ("crop", annotated.crops[i])):
            data = _png_bytes(arr)
            names.append({"name": f"{tag}/{i}", "size": len(data)})
            blobs.append(data)
    actions = ep.actions.astype("<f4").tobytes()
    header = {
        "schema_version": SCHEMA_VERSION,
        "seed": ep.seed,
        "env_id": ep.env_id,
        "instruction": ep.instruction,
        "n_frames": ep.n_frames,
        "subtask_index": ep.subtask_index,
        "gaze_boxes": [{"base": _box_json(g.base), "wrist": _box_json(g.wrist)}
                       for g in ep.gaze_boxes],
        "blobs": names,
        "actions_bytes": len(actions),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = len(head).to_bytes(4, "little") + head + b"".join(blobs) + actions
    return (
        len(payload).to_bytes(4, "little")
        + (zlib.crc32(payload) & 0xFFFFFFFF).to_bytes(4, "little")
        + payload
    )


def _decode_record(payload: bytes) -> AnnotatedEpisode:
    hlen = int.from_bytes(payload[:4], "little")
    header = json.loads(payload[4:4 + hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionUnsupported(f"schema {header.get('schema_version')} unsupported")
    offset = 4 + hlen
    images: dict[str, np.ndarray] = {}
    for blob in header["blobs"]:
        images[blob["name"]] = _png_decode(payload[offset:offset + blob["size"]])
        offset += blob["size"]
    actions = np.frombuffer(payload[offset:offset + header["actions_bytes"]], dtype="<f4")
    t = header["n_frames"]
    ep = Episode(
        instruction=header["instruction"],
        base_frames=np.stack([images[f"base/{i}"] for i in range(t)]),
        wrist_frames=np.stack([images[f"wrist/{i}"] for i in range(t)]),
        actions=actions.reshape(t - 1, 4).copy(),
        gaze_boxes=[GazeBoxes(base=_box_from_json(g["base"]), wrist=_box_from_json(g["wrist"]))
                    for g in header["gaze_boxes"]],
        subtask_index=list(header["subtask_index"]),
        env_id=header["env_id"],
        seed=header["seed"],
    )
    return AnnotatedEpisode(episode=ep, crops=np.stack([images[f"crop/{i}"] for i in range(t)]))


@dataclass(frozen=True)
class ShardRef:
    path: str
    episode_count: int
    sample_count: int
    size_bytes: int


def write_shard(episodes: list[AnnotatedEpisode], path: str | Path) -> ShardRef:
    if not episodes:
        raise ValueError("refusing to write an empty shard")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = b"".join(_encode_record(e) for e in episodes)
    path.write_bytes(data)
    return ShardRef(
        path=str(path),
        episode_count=len(episodes),
        sample_count=sum(e.episode.n_frames for e in episodes),
        size_bytes=len(data),
    )


def iter_shard(path: str | Path) -> Iterator[AnnotatedEpisode]:
    raw = Path(path).read_bytes()
    offset = 0
    while offset < len(raw):
        if offset + 8 > len(raw):
            raise ChecksumMismatch(f"{path}: truncated record prefix at byte {offset}")
        plen = int.from_bytes(raw[offset:offset + 4], "little")
        crc = int.from_bytes(raw[offset + 4:offset + 8], "little")
        payload = raw[offset + 8:offset + 8 + plen]
        if len(payload) != plen or (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
            raise ChecksumMismatch(f"{path}: record at byte {offset} failed CRC-32")
        yield _decode_record(payload)
        offset += 8 + plen


def read_shard(path: str | Path) -> list[AnnotatedEpisode]:
    return list(iter_shard(path))


# ---------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    root: str
    episodes_per_env: dict[str, int]
    seed0: int = 0
    chain_lengths: tuple[int, ...] = (1, 2, 3, 4, 5)
    episodes_per_shard: int = 16

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(
            root=d["root"],
            episodes_per_env={k: int(v) for k, v in d["episodes_per_env"].items()},
            seed0=int(d.get("seed0", 0)),
            chain_lengths=tuple(d.get("chain_lengths", (1, 2, 3, 4, 5))),
            episodes_per_shard=int(d.get("episodes_per_shard", 16)),
        )


@dataclass
class CorpusManifest:
    format_version: int
    shard_paths: list[str]
    episode_count: int
    sample_count: int
    env_histogram: dict[str, int]
    instruction_vocab: list[str]
    shards: list[dict] = field(default_factory=list)
    digest: str = ""

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "shard_paths": self.shard_paths,
            "episode_count": self.episode_count,
            "sample_count": self.sample_count,
            "env_histogram": self.env_histogram,
            "instruction_vocab": self.instruction_vocab,
            "shards": self.shards,
            "digest": self.digest,
        }

    def compute_digest(self) -> str:
        d = self.to_dict()
        d.pop("digest")
        return sha256_bytes(canonical_json(d).encode("utf-8"))

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        return cls(**{k: d[k] for k in ("format_version", "shard_paths", "episode_count",
                                         "sample_count", "env_histogram", "instruction_vocab",
                                         "shards", "digest")})

    @classmethod
    def load(cls, root: str | Path) -> "CorpusManifest":
        return cls.from_dict(read_json(Path(root) / "manifest.json"))


def build_corpus(config: CorpusConfig) -> CorpusManifest:
    """Collect, annotate, and shard episodes; write the manifest last (atomic)."""
    root = Path(config.root)
    (root / "shards").mkdir(parents=True, exist_ok=True)

    pending: list[AnnotatedEpisode] = []
    shard_refs: list[ShardRef] = []
    env_hist: dict[str, int] = {}
    vocab: set[str] = set()
    shard_idx = 0

    def flush() -> None:
        nonlocal shard_idx
        if not pending:
            return
        rel = f"shards/shard-{shard_idx:05d}.bin"
        shard_refs.append(write_shard(pending, root / rel))
        shard_idx += 1
        pending.clear()

    for env_id in sorted(config.episodes_per_env):
        count = config.episodes_per_env[env_id]
        for i in range(count):
            seed = mix64(config.seed0, ord(env_id), i)
            rng = np.random.default_rng(mix64(seed, 0x11))
            length = int(config.chain_lengths[rng.integers(0, len(config.chain_lengths))])
            ep = collect_episode(seed, env_id, length)
            pending.append(annotate_gaze(ep))
            env_hist[env_id] = env_hist.get(env_id, 0) + 1
            vocab.update(w for w in ep.instruction.split())
            if len(pending) >= config.episodes_per_shard:
                flush()
    flush()

    manifest = CorpusManifest(
        format_version=MANIFEST_VERSION,
        shard_paths=[str(Path(r.path).relative_to(root)) for r in shard_refs],
        episode_count=sum(r.episode_count for r in shard_refs),
        sample_count=sum(r.sample_count for r in shard_refs),
        env_histogram=env_hist,
        instruction_vocab=sorted(vocab),
        shards=[{"path": str(Path(r.path).relative_to(root)), "episodes": r.episode_count,
                 "samples": r.sample_count, "size_bytes": r.size_bytes} for r in shard_refs],
    )
    manifest.digest = manifest.compute_digest()
    atomic_write_text(root / "manifest.json", json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest


def iter_corpus_episodes(root: str | Path) -> Iterator[AnnotatedEpisode]:
    manifest = CorpusManifest.load(root)
    for rel in manifest.shard_paths:
        yield from iter_shard(Path(root) / rel)


def iter_corpus_crops(root: str | Path) -> Iterator[np.ndarray]:
    for annotated in iter_corpus_episodes(root):
        yield from annotated.crops


def verify_pairwise_integrity(root: str | Path) -> int:
    """Re-crop every stored frame with its stored box; must match bit-exactly.

    Returns the number of samples checked.
    """
    n = 0
    for annotated in iter_corpus_episodes(root):
        ep = annotated.episode
        for i in range(ep.n_frames):
            again = crop_and_resize(ep.base_frames[i], ep.gaze_boxes[i].base)
            if not np.array_equal(again, annotated.crops[i]):
                raise ChecksumMismatch(
                    f"crop mismatch: episode seed={ep.seed} frame={i}"
                )
            n += 1
    return n
