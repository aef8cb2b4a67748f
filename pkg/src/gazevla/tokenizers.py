"""Codecs between raw observations/actions and model tokens.

Four pieces: a word-level text vocabulary, a learned linear patch embedder
for camera images, a uniform 256-bin action quantizer, and a frozen PCA
patch codec that produces the latent reconstruction targets for gaze crops.

The shared id space is owned by :class:`VocabLayout`: specials, then text
words, then the 256 action bins, each range contiguous and disjoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .common import sha256_bytes
from .simworld import ACTION_DIM, TEMPLATE_WORDS, ContinuousAction

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
ACT_START_ID = 3
N_SPECIALS = 4
N_ACTION_BINS = 256
PATCH_SIZE = 8
SCENE_LATENT_DIM = 32  # default k
CROP_SIZE = 32


class UnknownWord(Exception):
    """Instruction contains a word outside the template vocabulary."""


class OutOfRange(Exception):
    """Action component outside [-1, 1] beyond tolerance."""


class ShapeMismatch(Exception):
    pass


class DegenerateCovariance(Exception):
    """Patch corpus has no variance; PCA is undefined."""


class NotFitted(Exception):
    pass


@dataclass(frozen=True)
class VocabLayout:
    """Single source of truth for the shared id space."""

    words: tuple[str, ...] = TEMPLATE_WORDS

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def text_offset(self) -> int:
        return N_SPECIALS

    @property
    def action_offset(self) -> int:
        return N_SPECIALS + self.n_words

    @property
    def vocab_size(self) -> int:
        return self.action_offset + N_ACTION_BINS

    def is_action_id(self, token_id: int) -> bool:
        return self.action_offset <= token_id < self.vocab_size


class TextVocab:
    """Word-level codec over the instruction templates; ids dense from 0."""

    def __init__(self, layout: Optional[VocabLayout] = None):
        self.layout = layout or VocabLayout()
        self._word_to_id = {w: self.layout.text_offset + i for i, w in enumerate(self.layout.words)}
        self._id_to_word = {i: w for w, i in self._word_to_id.items()}

    @staticmethod
    def normalize(text: str) -> list[str]:
        return [w.strip(".,;:!?") for w in text.lower().split() if w.strip(".,;:!?")]

    def encode(self, text: str, pad_to: Optional[int] = None) -> list[int]:
        ids = [BOS_ID]
        for word in self.normalize(text):
            if word not in self._word_to_id:
                raise UnknownWord(f"{word!r} is not in the instruction vocabulary")
            ids.append(self._word_to_id[word])
        ids.append(EOS_ID)
        if pad_to is not None:
            if len(ids) > pad_to:
                raise ShapeMismatch(f"instruction needs {len(ids)} slots but pad_to={pad_to}")
            ids.extend([PAD_ID] * (pad_to - len(ids)))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self._id_to_word[i] for i in ids if i in self._id_to_word)


class ActionCodec:
    """Uniform 256-bin quantizer per action dimension over [-1, 1].

    bin = floor((a + 1) / 2 * 256) clamped to [0, 255]; detokenize returns bin
    centers, so the roundtrip error is at most half a bin (1/256).
    """

    def __init__(self, layout: Optional[VocabLayout] = None):
        self.layout = layout or VocabLayout()
        self.n_bins = N_ACTION_BINS
        self.offset = self.layout.action_offset

    def bin_of(self, value: float) -> int:
        if abs(value) > 1.0 + 1e-9:
            raise OutOfRange(f"action component {value} outside [-1, 1]")
        b = math.floor((value + 1.0) / 2.0 * self.n_bins)
        return min(self.n_bins - 1, max(0, b))

    def center_of(self, bin_idx: int) -> float:
        if not 0 <= bin_idx < self.n_bins:
            raise OutOfRange(f"bin {bin_idx} outside [0, {self.n_bins})")
        return -1.0 + (bin_idx + 0.5) * (2.0 / self.n_bins)

    def unit_bin(self, value: float) -> int:
        """Quantize a [0,1] quantity (e.g. a normalized bbox coordinate)."""
        if not -1e-9 <= value <= 1.0 + 1e-9:
            raise OutOfRange(f"unit value {value} outside [0, 1]")
        return min(self.n_bins - 1, max(0, math.floor(value * self.n_bins)))

    def unit_center(self, bin_idx: int) -> float:
        return (bin_idx + 0.5) / self.n_bins

    def tokenize(self, action: Union[ContinuousAction, np.ndarray]) -> list[int]:
        vec = action.as_vector() if isinstance(action, ContinuousAction) else np.asarray(action, dtype=np.float64)
        if vec.shape != (ACTION_DIM,):
            raise ShapeMismatch(f"expected {ACTION_DIM} components, got {vec.shape}")
        return [self.offset + self.bin_of(float(v)) for v in vec]

    def detokenize(self, token_ids: Iterable[int]) -> ContinuousAction:
        ids = list(token_ids)
        if len(ids) != ACTION_DIM:
            raise ShapeMismatch(f"expected {ACTION_DIM} token ids, got {len(ids)}")
        vals = []
        for t in ids:
            if not self.layout.is_action_id(t):
                raise OutOfRange(f"token id {t} is not an action id")
            vals.append(self.center_of(t - self.offset))
        return ContinuousAction.from_vector(np.array(vals))


# ---------------------------------------------------------------------------
# image patching


def patchify(img: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """(H, W, 3) -> (n_patches, patch_size^2 * 3), patches in row-major order."""
    h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise ShapeMismatch(f"image {img.shape} not divisible by patch size {patch_size}")
    g = img.reshape(h // patch_size, patch_size, w // patch_size, patch_size, c)
    return g.transpose(0, 2, 1, 3, 4).reshape(-1, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, side: int, patch_size: int = PATCH_SIZE) -> np.ndarray:
    n = side // patch_size
    g = patches.reshape(n, n, patch_size, patch_size, 3)
    return g.transpose(0, 2, 1, 3, 4).reshape(side, side, 3)


class PatchEmbedder(nn.Module):
    """Linear patch projection + learned positional table and tag per view.

    A 64x64 view yields 64 tokens of width d_model. The projection is shared
    across views; position tables are per view so the model can tell base
    from wrist (and from the optional 32x32 crop view used by the
    explicit-grounding paradigm).
    """

    def __init__(self, d_model: int, view_sizes: Optional[dict[str, int]] = None,
                 patch_size: int = PATCH_SIZE):
        super().__init__()
        self.patch_size = patch_size
        self.view_sizes = dict(view_sizes or {"base": 64, "wrist": 64})
        patch_dim = patch_size * patch_size * 3
        self.proj = nn.Linear(patch_dim, d_model)
        self.pos = nn.ParameterDict()
        self.view_tag = nn.ParameterDict()
        for view, size in self.view_sizes.items():
            n = (size // patch_size) ** 2
            self.pos[view] = nn.Parameter(torch.zeros(n, d_model))
            self.view_tag[view] = nn.Parameter(torch.zeros(d_model))
            nn.init.normal_(self.pos[view], std=0.02)
            nn.init.normal_(self.view_tag[view], std=0.02)

    def n_tokens(self, view: str) -> int:
        return (self.view_sizes[view] // self.patch_size) ** 2

    def forward(self, images: torch.Tensor, view: str) -> torch.Tensor:
        """(B, H, W, 3) uint8/float -> (B, n_patches, d_model)."""
        if view not in self.view_sizes:
            raise ShapeMismatch(f"unknown view {view!r}")
        size = self.view_sizes[view]
        if images.dim() != 4 or images.shape[1:] != (size, size, 3):
            raise ShapeMismatch(f"expected (B,{size},{size},3), got {tuple(images.shape)}")
        x = images.to(self.proj.weight.dtype)
        if images.dtype == torch.uint8:
            x = x / 255.0
        p = self.patch_size
        b = x.shape[0]
        g = x.reshape(b, size // p, p, size // p, p, 3)
        patches = g.permute(0, 1, 3, 2, 4, 5).reshape(b, -1, p * p * 3)
        return self.proj(patches) + self.pos[view] + self.view_tag[view]


def encode_image(embedder: PatchEmbedder, image: np.ndarray, view: str) -> torch.Tensor:
    """Single image -> (n_patches, d_model); thin wrapper over the embedder."""
    t = torch.from_numpy(np.ascontiguousarray(image))
    return embedder(t.unsqueeze(0), view).squeeze(0)


# ---------------------------------------------------------------------------
# frozen scene tokenizer (PCA patch codec)

SCENE_TOKENIZER_MAGIC = "gazevla-scene-tokenizer"
SCENE_TOKENIZER_VERSION = 1


def fit_pca(patches: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean + top-k principal directions of (N, D) patch vectors.

    Components are returned as a (D, k) column-orthonormal matrix with a
    deterministic sign convention (largest-magnitude entry positive).
    """
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected (N, D) patches, got {x.shape}")
    n, d = x.shape
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(1, n - 1)
    if float(np.trace(cov)) <= 1e-12:
        raise DegenerateCovariance("patch corpus has zero variance")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    comps = eigvecs[:, order]
    for j in range(comps.shape[1]):
        i = int(np.argmax(np.abs(comps[:, j])))
        if comps[i, j] < 0:
            comps[:, j] = -comps[:, j]
    return mean, comps


class SceneTokenizer:
    """Frozen linear patch codec: center by mean, project on orthonormal basis.

    Encoding a 32x32 crop yields 16 tokens of width k; decoding maps latents
    back to pixel space. Immutable after fit; the digest pins the parameters.
    """

    def __init__(self, mean: Optional[np.ndarray], components: Optional[np.ndarray],
                 patch_size: int = PATCH_SIZE):
        self.patch_size = patch_size
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float32)
        self.components = None if components is None else np.asarray(components, dtype=np.float32)
        if self.components is not None:
            self.components.setflags(write=False)
            self.mean.setflags(write=False)

    @classmethod
    def unfitted(cls, patch_size: int = PATCH_SIZE) -> "SceneTokenizer":
        return cls(None, None, patch_size)

    @property
    def k(self) -> int:
        self._require_fitted()
        return self.components.shape[1]

    def _require_fitted(self) -> None:
        if self.components is None or self.mean is None:
            raise NotFitted("scene tokenizer has not been fitted")

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(S, S, 3) uint8/float image -> (n_patches, k) float32 latents."""
        self._require_fitted()
        img = np.asarray(image)
        if img.dtype == np.uint8:
            img = img.astype(np.float32) / 255.0
        patches = patchify(img.astype(np.float32), self.patch_size)
        if patches.shape[1] != self.mean.shape[0]:
            raise ShapeMismatch(f"patch dim {patches.shape[1]} != {self.mean.shape[0]}")
        return (patches - self.mean) @ self.components

    def decode(self, latents: np.ndarray, side: int = CROP_SIZE) -> np.ndarray:
        """(n_patches, k) latents -> (side, side, 3) float image in [0, 1]."""
        self._require_fitted()
        z = np.asarray(latents, dtype=np.float32)
        patches = z @ self.components.T + self.mean
        img = unpatchify(patches, side, self.patch_size)
        return np.clip(img, 0.0, 1.0)

    def to_bytes(self) -> bytes:
        self._require_fitted()
        mean64 = self.mean.astype("<f4").tobytes()
        comp64 = np.ascontiguousarray(self.components.astype("<f4")).tobytes()
        payload = mean64 + comp64
        header = {
            "magic": SCENE_TOKENIZER_MAGIC,
            "version": SCENE_TOKENIZER_VERSION,
            "patch_size": self.patch_size,
            "patch_dim": int(self.mean.shape[0]),
            "k": int(self.components.shape[1]),
            "digest": sha256_bytes(payload),
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        return len(head).to_bytes(4, "little") + head + payload

    def digest(self) -> str:
        payload = self.mean.astype("<f4").tobytes() + np.ascontiguousarray(
            self.components.astype("<f4")).tobytes()
        return sha256_bytes(payload)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "SceneTokenizer":
        raw = Path(path).read_bytes()
        hlen = int.from_bytes(raw[:4], "little")
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
        if header.get("magic") != SCENE_TOKENIZER_MAGIC:
            raise ValueError(f"{path} is not a scene tokenizer file")
        payload = raw[4 + hlen:]
        if sha256_bytes(payload) != header["digest"]:
            raise ValueError(f"{path}: payload digest mismatch")
        d, k = header["patch_dim"], header["k"]
        mean = np.frombuffer(payload[:4 * d], dtype="<f4")
        comps = np.frombuffer(payload[4 * d:], dtype="<f4").reshape(d, k)
        return cls(mean, comps, header["patch_size"])


def fit_scene_tokenizer(
    source: Union[str, Path, np.ndarray],
    k: int = SCENE_LATENT_DIM,
    min_patches: int = 10_000,
    patch_size: int = PATCH_SIZE,
) -> SceneTokenizer:
    """Fit the frozen PCA codec on gaze-crop patches.

    ``source`` is either a corpus root directory (crops are streamed from its
    shards) or a ready (N, patch_dim) / (N, S, S, 3) array.
    """
    if isinstance(source, (str, Path)):
        from .datapipe import iter_corpus_crops

        rows = [patchify(crop, patch_size) for crop in iter_corpus_crops(source)]
        if not rows:
            raise ValueError(f"corpus at {source} contains no crops")
        patches = np.concatenate(rows, axis=0).astype(np.float32) / 255.0
    else:
        arr = np.asarray(source)
        if arr.ndim == 4:
            if arr.dtype == np.uint8:
                arr = arr.astype(np.float32) / 255.0
            patches = np.concatenate([patchify(im, patch_size) for im in arr], axis=0)
        else:
            patches = arr
    if patches.shape[0] < min_patches:
        raise ValueError(
            f"need at least {min_patches} patches to fit (got {patches.shape[0]}); "
            "pass min_patches explicitly for small experiments"
        )
    mean, comps = fit_pca(patches, k)
    return SceneTokenizer(mean, comps, patch_size)
