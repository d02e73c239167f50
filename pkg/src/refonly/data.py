"""Self-supervised training data: sprites, blueprints, empty filtering, pair mining."""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DimensionError, EmptyImageError
from .numerics import Rng

DEFAULT_WINDOW = 9
DEFAULT_C = 0.02
DEFAULT_THRESHOLD = 0.9
DEFAULT_MIN_INK = 0.005
OUTLINE = (0.08, 0.08, 0.08)
SUPERSAMPLE = 4
HIST_BINS = 16
GRID = 4
GRID_WEIGHT = 0.5
OUTLINE_LUMA = 0.2


@dataclass
class Sprite:
    image: torch.Tensor  # 3×H×W in [0, 1], composited on white
    alpha: torch.Tensor  # 1×H×W
    identity_id: int
    pose_id: int
    palette: np.ndarray = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return f"{self.identity_id}_{self.pose_id}"


@dataclass
class TrainingPair:
    prompt: torch.Tensor
    target: torch.Tensor
    blueprint: torch.Tensor
    similarity: float
    prompt_index: int = -1
    target_index: int = -1
    prompt_alpha: torch.Tensor | None = field(default=None, repr=False)
    target_alpha: torch.Tensor | None = field(default=None, repr=False)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- generator

def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _identity_genome(rng: Rng) -> dict:
    u = rng.uniform
    palette = np.stack([
        _hsv(u(), 0.55 + 0.45 * u(), 0.5 + 0.5 * u()),    # hair
        _hsv(u(), 0.15 + 0.35 * u(), 0.8 + 0.2 * u()),    # skin
        _hsv(u(), 0.55 + 0.45 * u(), 0.45 + 0.55 * u()),  # shirt
        _hsv(u(), 0.55 + 0.45 * u(), 0.35 + 0.55 * u()),  # pants
    ])
    return {
        "palette": palette,
        "head_r": 4.2 + 1.2 * u(),
        "torso_w": 6.5 + 2.5 * u(),
        "torso_h": 7.5 + 2.0 * u(),
        "limb_r": 0.9 + 0.4 * u(),
        "arm_len": 5.0 + 2.0 * u(),
        "leg_len": 6.0 + 1.5 * u(),
        "long_hair": bool(u() < 0.5),
    }


def _pose_genome(rng: Rng) -> dict:
    u = rng.uniform
    return {
        "arm_l": math.radians(15 + 75 * u()),
        "arm_r": math.radians(15 + 75 * u()),
        "leg_l": math.radians(3 + 27 * u()),
        "leg_r": math.radians(3 + 27 * u()),
        "head_dx": -1.0 + 2.0 * u(),
        "shift": -1.5 + 3.0 * u(),
    }


def _sd_capsule(x, y, ax, ay, bx, by, r):
    px, py, dx, dy = x - ax, y - ay, bx - ax, by - ay
    h = np.clip((px * dx + py * dy) / (dx * dx + dy * dy), 0, 1)
    return np.hypot(px - h * dx, py - h * dy) - r


def _sd_ellipse(x, y, cx, cy, rx, ry):
    return (np.hypot((x - cx) / rx, (y - cy) / ry) - 1) * min(rx, ry)


def _sd_box(x, y, cx, cy, hw, hh, rad):
    qx = np.abs(x - cx) - hw + rad
    qy = np.abs(y - cy) - hh + rad
    return np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0) - rad


def render_sprite(genome: dict, pose: dict, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize one character; returns (rgb H×W×3 uint8, alpha H×W uint8)."""
    s = H / 32.0
    n = H * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE / s  # in 32-px units
    y, x = np.meshgrid(coords, coords, indexing="ij")
    cx = 16 + pose["shift"]
    head_r, tw, th = genome["head_r"], genome["torso_w"], genome["torso_h"]
    head_cy = 2.0 + head_r
    torso_top = head_cy + head_r - 0.5
    torso_cy = torso_top + th / 2
    hip_y = torso_top + th - 0.5
    lr = genome["limb_r"]
    hair, skin, shirt, pants = genome["palette"]

    parts = []
    for sign, ang in ((-1, pose["leg_l"]), (1, pose["leg_r"])):
        ax = cx + sign * tw / 4
        length = min(genome["leg_len"], 30.5 - hip_y - lr)
        parts.append((_sd_capsule(x, y, ax, hip_y, ax + sign * length * math.sin(ang),
                                  hip_y + length * math.cos(ang), lr * 1.2), pants))
    parts.append((_sd_box(x, y, cx, torso_cy, tw / 2, th / 2, 1.5), shirt))
    for sign, ang in ((-1, pose["arm_l"]), (1, pose["arm_r"])):
        ax, ay = cx + sign * (tw / 2 - 0.5), torso_top + 1.2
        length = genome["arm_len"]
        parts.append((_sd_capsule(x, y, ax, ay, ax + sign * length * math.sin(ang),
                                  ay + length * math.cos(ang), lr), skin))
    hcx = cx + pose["head_dx"]
    head = _sd_ellipse(x, y, hcx, head_cy, head_r, head_r)
    if genome["long_hair"]:
        back = _sd_box(x, y, hcx, head_cy + 1.5, head_r + 0.8, head_r * 0.9, 1.5)
        parts.append((back, hair))
    parts.append((head, skin))
    parts.append((np.maximum(_sd_ellipse(x, y, hcx, head_cy - 0.3, head_r + 0.4, head_r + 0.3),
                             y - (head_cy - 0.6)), hair))

    rgb = np.ones((n, n, 3))
    cover = np.zeros((n, n), dtype=bool)
    width = 0.9  # outline thickness, 32-px units
    for sd, color in parts:
        inside = sd < 0
        rgb[inside] = color
        rgb[inside & (sd > -width)] = OUTLINE
        cover |= inside
    alpha = cover.reshape(H, SUPERSAMPLE, H, SUPERSAMPLE).mean(axis=(1, 3))
    prem = (rgb * cover[..., None]).reshape(H, SUPERSAMPLE, H, SUPERSAMPLE, 3).mean(axis=(1, 3))
    out = prem + (1 - alpha[..., None])
    rgb8 = np.clip(np.rint(out * 255), 0, 255).astype(np.uint8)
    a8 = np.clip(np.rint(alpha * 255), 0, 255).astype(np.uint8)
    rgb8[a8 == 0] = 255
    return rgb8, a8


def _to_sprite(rgb8, a8, identity_id, pose_id, palette=None) -> Sprite:
    image = torch.from_numpy(rgb8.astype(np.float32) / 255).permute(2, 0, 1).contiguous()
    alpha = torch.from_numpy(a8.astype(np.float32) / 255)[None]
    return Sprite(image, alpha, identity_id, pose_id, palette)


def generate_sprites(n_identities: int, poses_per_identity: int, H: int, rng: Rng,
                     first_identity: int = 0, min_palette_gap: float = 0.1) -> list[Sprite]:
    """Procedural character corpus; deterministic in ``rng.seed``.

    Identity ``i`` draws its genome from ``rng.spawn(i)`` (with rejection until
    its palette differs from every earlier identity's by more than
    ``min_palette_gap`` in some channel). ``first_identity`` lets a held-out
    set continue the same identity sequence.
    """
    if n_identities < 1 or poses_per_identity < 1:
        raise ConfigError("need at least one identity and one pose")
    if H % 8:
        raise DimensionError(f"sprite size {H} must be divisible by 8")
    genomes: list[dict] = []
    for ident in range(first_identity + n_identities):
        sub = rng.spawn(ident)
        while True:
            g = _identity_genome(sub)
            if all(np.abs(g["palette"] - o["palette"]).max() > min_palette_gap for o in genomes):
                break
        genomes.append(g)
    sprites = []
    for ident in range(first_identity, first_identity + n_identities):
        g = genomes[ident]
        for pose in range(poses_per_identity):
            rgb8, a8 = render_sprite(g, _pose_genome(rng.spawn(ident, pose, 1)), H)
            sprites.append(_to_sprite(rgb8, a8, ident, pose, g["palette"]))
    return sprites


# ---------------------------------------------------------------- blueprint

def luminance(image) -> np.ndarray:
    img = _np(image)
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def local_mean(gray: np.ndarray, window: int) -> np.ndarray:
    """Box mean over ``window×window`` with edge replication."""
    r = window // 2
    p = np.pad(gray, r, mode="edge")
    ii = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    ii[1:, 1:] = p.cumsum(0).cumsum(1)
    h, w = gray.shape
    s = ii[window:window + h, window:window + w] - ii[:h, window:window + w] \
        - ii[window:window + h, :w] + ii[:h, :w]
    return s / (window * window)


def extract_blueprint(image, window: int = DEFAULT_WINDOW, C: float = DEFAULT_C) -> torch.Tensor:
    """Adaptive mean threshold plus inversion: 1 where a pixel is darker than its neighbourhood.

    ``image`` is ``3×H×W`` in [0, 1]; the result is a ``1×H×W`` float mask
    with white (1) lines on black (0).
    """
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"window must be odd and >= 3, got {window}")
    gray = luminance(image)
    ink = gray < local_mean(gray, window) - C
    return torch.from_numpy(ink.astype(np.float32))[None]


def ink_fraction(image, window: int = DEFAULT_WINDOW, C: float = DEFAULT_C) -> float:
    return float(extract_blueprint(image, window, C).mean())


def is_empty_image(image, min_ink_fraction: float = DEFAULT_MIN_INK,
                   window: int = DEFAULT_WINDOW, C: float = DEFAULT_C) -> bool:
    if not 0 <= min_ink_fraction < 1:
        raise ConfigError(f"min_ink_fraction must be in [0, 1), got {min_ink_fraction}")
    return ink_fraction(image, window, C) < min_ink_fraction


# ---------------------------------------------------------------- similarity

def embed(image, alpha) -> np.ndarray:
    """64-d unit descriptor of a sprite's colours and coarse layout.

    Three 16-bin foreground histograms (one per channel, outline-dark pixels
    excluded so the shared line colour does not dominate) followed by a 4x4
    grid of mean darkness, mean-centred and down-weighted by ``GRID_WEIGHT``.
    """
    img, a = _np(image), _np(alpha)
    if a.ndim == 3:
        a = a[0]
    if img.shape[-2:] != a.shape:
        raise DimensionError("image and alpha sizes differ")
    fg = a > 0.5
    if not fg.any():
        raise EmptyImageError("alpha has no foreground")
    lum = luminance(img)
    colored = fg & (lum > OUTLINE_LUMA)
    if colored.any():
        fg = colored
    parts = []
    for ch in img:
        hist = np.bincount(np.minimum((ch[fg] * HIST_BINS).astype(int), HIST_BINS - 1), minlength=HIST_BINS)
        parts.append(hist / fg.sum())
    h, w = lum.shape
    grid = (1.0 - lum).reshape(GRID, h // GRID, GRID, w // GRID).mean(axis=(1, 3)).ravel()
    parts.append(GRID_WEIGHT * (grid - grid.mean()))
    v = np.concatenate(parts)
    return v / np.linalg.norm(v)


def similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    return e @ e.T


def mine_pairs(corpus: list[Sprite], threshold: float = DEFAULT_THRESHOLD,
               window: int = DEFAULT_WINDOW, C: float = DEFAULT_C,
               min_ink_fraction: float = DEFAULT_MIN_INK) -> list[TrainingPair]:
    """All ordered pairs ``(i, j)``, ``i != j``, with cosine similarity above ``threshold``.

    Sprites whose blueprint is (nearly) empty are dropped before mining.
    Pairs come out in row-major index order.
    """
    keep = [i for i, s in enumerate(corpus) if not is_empty_image(s.image, min_ink_fraction, window, C)]
    if len(keep) < 2 or threshold > 1:
        return []
    emb = np.stack([embed(corpus[i].image, corpus[i].alpha) for i in keep])
    sim = similarity_matrix(emb)
    blueprints: dict[int, torch.Tensor] = {}
    pairs = []
    for a, b in zip(*np.nonzero(sim > threshold)):
        if a == b:
            continue
        i, j = keep[a], keep[b]
        if j not in blueprints:
            blueprints[j] = extract_blueprint(corpus[j].image, window, C)
        pairs.append(TrainingPair(corpus[i].image, corpus[j].image, blueprints[j], float(sim[a, b]),
                                  i, j, corpus[i].alpha, corpus[j].alpha))
    return pairs


# ---------------------------------------------------------------- files

def save_png(path, image, alpha=None):
    """Write a ``C×H×W`` [0, 1] tensor as 8-bit PNG (L, RGB, or RGBA with ``alpha``)."""
    arr = np.clip(np.rint(_np(image) * 255), 0, 255).astype(np.uint8)
    if alpha is not None:
        arr = np.concatenate([arr, np.clip(np.rint(_np(alpha) * 255), 0, 255).astype(np.uint8)])
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[arr.shape[0]]
    data = arr[0] if mode == "L" else arr.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode).save(path, format="PNG")


def load_png(path) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Returns ``(image, alpha)``; grayscale files give a ``1×H×W`` image and no alpha."""
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im)
    if arr.ndim == 2:
        return torch.from_numpy(arr.astype(np.float32) / 255)[None], None
    t = torch.from_numpy(arr.astype(np.float32) / 255).permute(2, 0, 1).contiguous()
    if t.shape[0] == 4:
        return t[:3].contiguous(), t[3:].contiguous()
    return t, None


def save_corpus(sprites: list[Sprite], root, config: dict | None = None) -> None:
    root = Path(root)
    for s in sprites:
        save_png(root / "sprites" / f"{s.name}.png", s.image, s.alpha)
    if config is not None:
        (root / "corpus.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(root) -> list[Sprite]:
    root = Path(root)
    sprites = []
    for path in (root / "sprites").glob("*.png"):
        ident, pose = (int(v) for v in path.stem.split("_"))
        image, alpha = load_png(path)
        sprites.append(Sprite(image, alpha, ident, pose))
    sprites.sort(key=lambda s: (s.identity_id, s.pose_id))
    return sprites


def write_manifest(path, pairs: list[TrainingPair], corpus: list[Sprite], window: int, C: float) -> None:
    """One line per pair: prompt path, target path, similarity, window, C (tab-separated)."""
    lines = []
    for p in pairs:
        lines.append("\t".join([
            f"sprites/{corpus[p.prompt_index].name}.png",
            f"sprites/{corpus[p.target_index].name}.png",
            f"{p.similarity:.6f}",
            f"window={window}",
            f"C={C!r}",
        ]))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def read_manifest(path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        prompt, target, sim, window, c = line.split("\t")
        records.append({
            "prompt": prompt,
            "target": target,
            "similarity": float(sim),
            "window": int(window.split("=", 1)[1]),
            "C": float(c.split("=", 1)[1]),
        })
    return records


def load_pairs(root, manifest: str = "pairs.manifest") -> list[TrainingPair]:
    """Materialize manifest records, recomputing each blueprint from its target PNG."""
    root = Path(root)
    cache: dict[str, tuple] = {}

    def get(rel):
        if rel not in cache:
            cache[rel] = load_png(root / rel)
        return cache[rel]

    pairs = []
    for rec in read_manifest(root / manifest):
        cp, ca = get(rec["prompt"])
        x0, xa = get(rec["target"])
        pairs.append(TrainingPair(cp, x0, extract_blueprint(x0, rec["window"], rec["C"]), rec["similarity"],
                                  prompt_alpha=ca, target_alpha=xa))
    return pairs
