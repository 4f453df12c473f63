"""Windowed linear motion codec with residual vector quantization.

Non-overlapping d-frame windows are flattened, centered, and projected onto
the top-C principal directions (the encoder); the decoder is the transpose
plus re-centering.  Each latent frame is then quantized by R stacked
codebooks: layer i picks the nearest entry to the residue left by layers
< i, and the residue recursion is r[i+1] = r[i] - chosen[i].

Body and hand each get their own codec; tokens carry the fingerprint of the
codec that produced them and refuse to decode through any other.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .cluster import assign_nearest, kmeans
from .errors import ConfigError, FingerprintMismatchError, RankDeficiencyError, TooShortError
from .motion import FrameMatrix, time_derivative

MAGIC = b"RVQC"
VERSION = 1


@dataclass(frozen=True)
class Codebook:
    """One quantization layer: N_VQ entries of dimension C."""

    entries: np.ndarray  # (N_VQ, C)
    layer: int

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise ValueError("codebook entries must be (N_VQ, C)")
        if not np.isfinite(e).all():
            raise ValueError("non-finite codebook entries")
        if len(e) > 1:
            d2 = (
                np.sum(e**2, axis=1)[:, None]
                - 2.0 * e @ e.T
                + np.sum(e**2, axis=1)[None, :]
            )
            np.fill_diagonal(d2, np.inf)
            if d2.min() <= 0.0:
                raise ValueError("duplicate codebook entries")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class RvqCodec:
    """Linear window codec plus residual codebooks for one body part."""

    part: str  # "body" | "hand"
    d: int  # frames per token
    latent_dim: int  # C
    mean: np.ndarray  # (d*D,)
    encoder: np.ndarray  # (C, d*D)
    decoder: np.ndarray  # (d*D, C)
    codebooks: tuple[Codebook, ...]
    rotation: str = "cont-6"
    has_root: bool = True
    train_recon_error: float = 0.0  # tail singular energy at fit time
    fingerprint: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.codebooks) < 1:
            raise ValueError("need at least one quantization layer")
        c, dd = self.encoder.shape
        if c != self.latent_dim or self.decoder.shape != (dd, c) or self.mean.shape != (dd,):
            raise ValueError("encoder/decoder/mean dimensions disagree")
        for cb in self.codebooks:
            if cb.entries.shape[1] != c:
                raise ValueError("codebook dimension does not match latent dim")
        for name in ("mean", "encoder", "decoder"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "fingerprint", self._compute_fingerprint())

    def _compute_fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.part}|{self.d}|{self.latent_dim}|{len(self.codebooks)}".encode())
        for arr in (self.mean, self.encoder, self.decoder):
            h.update(np.ascontiguousarray(arr).tobytes())
        for cb in self.codebooks:
            h.update(np.ascontiguousarray(cb.entries).tobytes())
        return h.hexdigest()

    @property
    def layers(self) -> int:
        return len(self.codebooks)

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].size

    @property
    def frame_dim(self) -> int:
        return self.encoder.shape[1] // self.d


@dataclass(frozen=True)
class TokenSeq:
    """L token frames x R layers of codebook indices for one part."""

    indices: np.ndarray  # (L, R) int
    part: str
    fingerprint: str
    padded_frames: int = 0  # trailing frames added by edge replication

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2:
            raise ValueError("token indices must be (L, R)")
        if idx.size and idx.min() < 0:
            raise ValueError("negative token index")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def length(self) -> int:
        return self.indices.shape[0]

    @property
    def layers(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class LatentSeq:
    """L x C real latent frames (codebook sums or blends of them)."""

    values: np.ndarray  # (L, C)
    part: str
    fingerprint: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.isfinite(v).all():
            raise ValueError("latents must be a finite (L, C) matrix")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# windowing


def window_frames(data: np.ndarray, d: int) -> tuple[np.ndarray, int]:
    """Flatten to non-overlapping d-frame windows, edge-replicating the tail.

    Returns (windows (L, d*D), padded_frame_count).
    """
    data = np.asarray(data, dtype=np.float64)
    k = data.shape[0]
    if k == 0:
        raise TooShortError("empty clip")
    pad = (-k) % d
    if pad:
        data = np.vstack([data, np.repeat(data[-1:], pad, axis=0)])
    l = data.shape[0] // d
    return data.reshape(l, d * data.shape[1]), pad


def _as_data(m) -> np.ndarray:
    return m.data if isinstance(m, FrameMatrix) else np.asarray(m, dtype=np.float64)


# ---------------------------------------------------------------------------
# linear codec fit


def fit_linear_codec(
    matrices, d: int, latent_dim: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Fit the windowed PCA codec on a set of frame matrices.

    Returns (mean, encoder, decoder, reconstruction_error); the error is the
    tail singular-value energy of the centered window matrix.  Raises when
    the windows span fewer than ``latent_dim`` directions.
    """
    if isinstance(matrices, (FrameMatrix, np.ndarray)):
        matrices = [matrices]
    windows = np.vstack([window_frames(_as_data(m), d)[0] for m in matrices])
    n, dd = windows.shape
    if latent_dim < 1 or latent_dim > dd:
        raise ConfigError(f"latent dim must be in 1..{dd}")
    if n < latent_dim:
        raise ConfigError(f"{n} windows < latent dim {latent_dim}")
    mean = windows.mean(axis=0)
    centered = windows - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, dd) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    if rank < latent_dim:
        raise RankDeficiencyError(
            f"windows have rank {rank} < latent dim {latent_dim}", rank=rank
        )
    encoder = vt[:latent_dim]
    decoder = encoder.T.copy()
    recon_error = float(np.sum(s[latent_dim:] ** 2))
    return mean, encoder, decoder, recon_error


# ---------------------------------------------------------------------------
# codebook training: greedy residual k-means


def _distinct_or_reseed(centroids: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Replace duplicate centroids with the largest-error points."""
    _, d2 = assign_nearest(points, centroids)
    order = list(np.argsort(-d2, kind="stable"))
    out = centroids.copy()
    for _ in range(len(out)):
        seen: dict[bytes, int] = {}
        dup = None
        for j, row in enumerate(out):
            key = row.tobytes()
            if key in seen:
                dup = j
                break
            seen[key] = j
        if dup is None:
            return out
        while order:
            cand = points[order.pop(0)]
            if cand.tobytes() not in {r.tobytes() for r in out}:
                out[dup] = cand
                break
        else:
            raise ConfigError(
                "cannot build a duplicate-free codebook: too few distinct points"
            )
    return out


def train_codebooks(
    latents: np.ndarray, layers: int, codebook_size: int, seed: int = 0
) -> tuple[tuple[Codebook, ...], list[float]]:
    """Greedy residual k-means: layer i+1 clusters the residues of layer i.

    Returns the codebooks and the mean squared residual energy per stage
    (length layers+1, starting with the raw latent energy); the sequence is
    non-increasing because each layer's centroids are cluster means.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2:
        raise ConfigError("latents must be (n, C)")
    if codebook_size > len(z):
        raise ConfigError(f"codebook size {codebook_size} > {len(z)} samples")
    if layers < 1:
        raise ConfigError("need at least one layer")
    residues = z.copy()
    books: list[Codebook] = []
    energies = [float(np.mean(np.sum(residues**2, axis=1)))]
    for i in range(layers):
        result = kmeans(residues, codebook_size, seed=seed + i)
        centroids = _distinct_or_reseed(result.centroids, residues)
        labels, _ = assign_nearest(residues, centroids)
        books.append(Codebook(entries=centroids, layer=i + 1))
        residues = residues - centroids[labels]
        energies.append(float(np.mean(np.sum(residues**2, axis=1))))
    return tuple(books), energies


# ---------------------------------------------------------------------------
# quantization


def quantize_batch(z: np.ndarray, codebooks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize (L, C) latents through all layers.

    Returns (indices (L, R), quantized sums (L, C), final residues (L, C)).
    Each layer picks the exact nearest entry to its incoming residue; ties
    break to the lowest index.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    books = [cb.entries if isinstance(cb, Codebook) else np.asarray(cb) for cb in codebooks]
    if not books:
        raise ConfigError("no codebooks")
    if books[0].shape[1] != z.shape[1]:
        raise ValueError(f"latent dim {z.shape[1]} != codebook dim {books[0].shape[1]}")
    residues = z.copy()
    quantized = np.zeros_like(z)
    indices = np.empty((z.shape[0], len(books)), dtype=np.int64)
    for i, entries in enumerate(books):
        labels, _ = assign_nearest(residues, entries)
        chosen = entries[labels]
        indices[:, i] = labels
        quantized += chosen
        residues -= chosen
    return indices, quantized, residues


def quantize(z: np.ndarray, codebooks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-vector quantization; see :func:`quantize_batch`."""
    idx, q, r = quantize_batch(np.asarray(z)[None, :], codebooks)
    return idx[0], q[0], r[0]


# ---------------------------------------------------------------------------
# encode / decode


def encode_latents(m, codec: RvqCodec) -> LatentSeq:
    """Pre-quantization latents of a frame matrix (one row per token frame)."""
    windows, _ = window_frames(_as_data(m), codec.d)
    if windows.shape[1] != codec.encoder.shape[1]:
        raise ValueError(
            f"window dim {windows.shape[1]} does not match codec ({codec.part})"
        )
    z = (windows - codec.mean) @ codec.encoder.T
    return LatentSeq(values=z, part=codec.part, fingerprint=codec.fingerprint)


def encode(m, codec: RvqCodec) -> TokenSeq:
    """Tokenize a frame matrix: L = ceil(K/d) frames x R layers of indices."""
    data = _as_data(m)
    windows, pad = window_frames(data, codec.d)
    if windows.shape[1] != codec.encoder.shape[1]:
        raise ValueError(
            f"window dim {windows.shape[1]} does not match codec ({codec.part})"
        )
    z = (windows - codec.mean) @ codec.encoder.T
    indices, _, _ = quantize_batch(z, codec.codebooks)
    return TokenSeq(
        indices=indices, part=codec.part, fingerprint=codec.fingerprint, padded_frames=pad
    )


def tokens_to_latents(tokens: TokenSeq, codec: RvqCodec) -> LatentSeq:
    """Sum the selected codebook entries per frame."""
    if tokens.fingerprint != codec.fingerprint:
        raise FingerprintMismatchError(
            f"{tokens.part} tokens bound to codec {tokens.fingerprint[:12]}..., "
            f"got {codec.fingerprint[:12]}..."
        )
    if tokens.layers != codec.layers:
        raise ValueError("token layer count does not match codec")
    out = np.zeros((tokens.length, codec.latent_dim))
    for i, cb in enumerate(codec.codebooks):
        if tokens.indices.size and tokens.indices[:, i].max() >= cb.size:
            raise ValueError("token index out of codebook range")
        out += cb.entries[tokens.indices[:, i]]
    return LatentSeq(values=out, part=codec.part, fingerprint=codec.fingerprint)


def decode(tokens_or_latents, codec: RvqCodec, trim: bool = True) -> FrameMatrix:
    """Invert the codec: latents (or token sums) back to a frame matrix.

    Accepts raw latent sequences so blended latents decode the same way as
    quantized ones.  With ``trim`` the frames added by encode-side padding
    are dropped (only known for token inputs).
    """
    pad = 0
    if isinstance(tokens_or_latents, TokenSeq):
        pad = tokens_or_latents.padded_frames
        latents = tokens_to_latents(tokens_or_latents, codec)
    elif isinstance(tokens_or_latents, LatentSeq):
        latents = tokens_or_latents
        if latents.fingerprint and latents.fingerprint != codec.fingerprint:
            raise FingerprintMismatchError(
                f"latents bound to codec {latents.fingerprint[:12]}..., "
                f"got {codec.fingerprint[:12]}..."
            )
    else:
        latents = LatentSeq(values=np.asarray(tokens_or_latents), part=codec.part)
    windows = latents.values @ codec.decoder.T + codec.mean
    frames = windows.reshape(latents.length * codec.d, codec.frame_dim)
    if trim and pad:
        frames = frames[:-pad]
    return FrameMatrix(frames, rotation=codec.rotation, has_root=codec.has_root)


# ---------------------------------------------------------------------------
# reconstruction loss diagnostics


def rvq_loss(
    m,
    m_star,
    latents: np.ndarray,
    quantized: np.ndarray,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 0.02, 1.0),
    fps: float = 1.0,
) -> dict[str, float]:
    """Reconstruction loss terms: L1 on position/velocity/acceleration plus
    the two L2 latent terms (commitment and codebook), reported as
    diagnostics.  All terms are means over entries; the velocity weight also
    scales the acceleration term.
    """
    a, b = _as_data(m), _as_data(m_star)
    if a.shape != b.shape:
        raise ValueError("motion and reconstruction shapes differ")
    w1, w2, w3, w4 = weights
    position = float(np.mean(np.abs(a - b)))
    va, vb = time_derivative(a, fps), time_derivative(b, fps)
    velocity = float(np.mean(np.abs(va - vb)))
    aa, ab = time_derivative(va, fps), time_derivative(vb, fps)
    acceleration = float(np.mean(np.abs(aa - ab)))
    z = np.asarray(latents, dtype=np.float64)
    q = np.asarray(quantized, dtype=np.float64)
    commitment = float(np.mean((z - q) ** 2))
    codebook = commitment  # identical value without gradients; kept separate
    total = (
        w1 * position
        + w2 * velocity
        + w2 * acceleration
        + w3 * commitment
        + w4 * codebook
    )
    return {
        "position": position,
        "velocity": velocity,
        "acceleration": acceleration,
        "commitment": commitment,
        "codebook": codebook,
        "total": total,
    }


# ---------------------------------------------------------------------------
# training entry point


def build_codec(
    matrices,
    d: int,
    latent_dim: int,
    layers: int = 4,
    codebook_size: int = 512,
    seed: int = 0,
    part: str = "body",
    rotation: str = "cont-6",
    has_root: bool = True,
) -> tuple[RvqCodec, list[float]]:
    """Fit the linear codec and train the residual codebooks in one pass.

    Returns the codec plus the per-stage residual energies from codebook
    training (useful for capacity diagnostics).
    """
    if isinstance(matrices, (FrameMatrix, np.ndarray)):
        matrices = [matrices]
    mean, encoder, decoder, recon = fit_linear_codec(matrices, d, latent_dim)
    all_windows = np.vstack([window_frames(_as_data(m), d)[0] for m in matrices])
    z = (all_windows - mean) @ encoder.T
    books, energies = train_codebooks(z, layers, codebook_size, seed=seed)
    codec = RvqCodec(
        part=part,
        d=d,
        latent_dim=latent_dim,
        mean=mean,
        encoder=encoder,
        decoder=decoder,
        codebooks=books,
        rotation=rotation,
        has_root=has_root,
        train_recon_error=recon,
    )
    return codec, energies


# ---------------------------------------------------------------------------
# codec archive: single binary file holding one or two part codecs


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    shape = a.shape
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape) + a.tobytes()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError("truncated codec archive")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def read_str(self) -> str:
        (n,) = struct.unpack("<H", self.take(2))
        return self.take(n).decode("utf-8")

    def read_array(self) -> np.ndarray:
        (ndim,) = struct.unpack("<B", self.take(1))
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).copy()


def save_codecs(path, *codecs: RvqCodec) -> None:
    """Write codecs into one archive: magic, version, then per-part blocks."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HB", VERSION, len(codecs))
    for c in codecs:
        blob += _pack_str(c.part)
        blob += _pack_str(c.rotation)
        blob += struct.pack(
            "<BIIII", int(c.has_root), c.d, c.latent_dim, c.layers, c.codebook_size
        )
        blob += struct.pack("<d", c.train_recon_error)
        blob += _pack_array(c.mean)
        blob += _pack_array(c.encoder)
        blob += _pack_array(c.decoder)
        for cb in c.codebooks:
            blob += _pack_array(cb.entries)
        blob += _pack_str(c.fingerprint)
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_codecs(path) -> list[RvqCodec]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a codec archive")
    r = _Reader(raw)
    r.take(4)
    version, count = struct.unpack("<HB", r.take(3))
    if version != VERSION:
        raise ValueError(f"unsupported codec archive version {version}")
    out = []
    for _ in range(count):
        part = r.read_str()
        rotation = r.read_str()
        has_root, d, c_dim, layers, n_vq = struct.unpack("<BIIII", r.take(17))
        (recon,) = struct.unpack("<d", r.take(8))
        mean = r.read_array()
        encoder = r.read_array()
        decoder = r.read_array()
        books = tuple(
            Codebook(entries=r.read_array(), layer=i + 1) for i in range(layers)
        )
        stored_fp = r.read_str()
        codec = RvqCodec(
            part=part,
            d=d,
            latent_dim=c_dim,
            mean=mean,
            encoder=encoder,
            decoder=decoder,
            codebooks=books,
            rotation=rotation,
            has_root=bool(has_root),
            train_recon_error=recon,
        )
        if codec.fingerprint != stored_fp:
            raise ValueError(f"{path}: fingerprint mismatch, archive corrupted")
        out.append(codec)
    return out


# ---------------------------------------------------------------------------
# token text format: "body indices | hand indices", one token frame per line


def save_token_text(path, body: TokenSeq, hand: TokenSeq) -> None:
    if body.length != hand.length:
        raise ValueError("body and hand token sequences differ in length")
    with open(path, "w") as f:
        f.write(f"# codec {body.fingerprint} {hand.fingerprint} "
                f"pad {body.padded_frames} {hand.padded_frames}\n")
        for i in range(body.length):
            left = " ".join(str(v) for v in body.indices[i])
            right = " ".join(str(v) for v in hand.indices[i])
            f.write(f"{left} | {right}\n")


def load_token_text(path) -> tuple[TokenSeq, TokenSeq]:
    body_rows, hand_rows = [], []
    body_fp = hand_fp = ""
    body_pad = hand_pad = 0
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line.split()
                if len(parts) >= 3 and parts[1] == "codec":
                    body_fp, hand_fp = parts[2], parts[3]
                    if len(parts) >= 7 and parts[4] == "pad":
                        body_pad, hand_pad = int(parts[5]), int(parts[6])
                continue
            left, _, right = line.partition("|")
            body_rows.append([int(v) for v in left.split()])
            hand_rows.append([int(v) for v in right.split()])
    body = TokenSeq(np.array(body_rows, dtype=np.int64).reshape(len(body_rows), -1),
                    part="body", fingerprint=body_fp, padded_frames=body_pad)
    hand = TokenSeq(np.array(hand_rows, dtype=np.int64).reshape(len(hand_rows), -1),
                    part="hand", fingerprint=hand_fp, padded_frames=hand_pad)
    return body, hand
