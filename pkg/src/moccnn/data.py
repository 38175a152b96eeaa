"""Scene ingestion, density-map targets, patch extraction, and the synthetic benchmark.

Ground truth arrives as dot annotations (one (x, y) per target center, pixel
coordinates, origin top-left). Each dot is rendered as a discretized isotropic
Gaussian normalized to unit mass over the untruncated pixel grid and truncated
at radius 4*sigma; the per-patch regression target is the density sum over the
patch footprint, so a dot straddling a patch boundary splits its mass between
the neighbours instead of being counted fully by either.

Evaluation images are tiled into non-overlapping 72x72 patches at offsets
(72i, 72j); remainder strips narrower than a patch are excluded. Training
patches are sampled at uniformly random valid offsets.

File formats: binary PGM ("P5", maxval 255) images; UTF-8 annotation text with
one "x y" pair per line ('#' comments and blank lines ignored); manifest lines
"scene-id image-path annotation-path [mode-label]".
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

PATCH_SIZE = 72
DEFAULT_SIGMA = 4.0


@dataclass
class Scene:
    id: str
    image: np.ndarray           # (H, W) grayscale in [0, 1]
    dots: np.ndarray            # (n, 2) of (x, y) target centers
    mode_label: str = None      # synthetic appearance mode, analysis only

    @property
    def size(self):
        return self.image.shape


@dataclass
class DensityMap:
    values: np.ndarray          # (H, W), non-negative
    sigma: float

    @property
    def total_mass(self):
        return float(self.values.sum())


@dataclass
class PatchSample:
    patch: np.ndarray           # (1, PATCH_SIZE, PATCH_SIZE)
    target: float
    origin: tuple               # (scene id, x offset, y offset)


# ---------------------------------------------------------------------------
# PGM image and annotation files
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    """Write a [0,1] grayscale array as binary PGM, maxval 255."""
    h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    """Parse a binary PGM (P5, maxval 255) into a [0,1] float array."""
    with open(path, "rb") as fh:
        data = fh.read()

    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        return data[start:pos]

    if next_token() != b"P5":
        raise ParseError(f"{path}: not a binary PGM (missing P5 magic)")
    try:
        w = int(next_token())
        h = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PGM header") from exc
    if w < 1 or h < 1:
        raise ParseError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval} (expected 255)")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise ParseError(f"{path}: pixel data truncated ({len(raster)} of {w * h} bytes)")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float32) / 255.0


def read_annotations(path, width, height):
    """Parse "x y" dot lines; reject out-of-bounds dots naming the line."""
    dots = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'x y', got {line!r}")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from exc
            if not (0.0 <= x < width and 0.0 <= y < height):
                raise ValidationError(
                    f"{path}:{lineno}: dot ({x}, {y}) outside {width}x{height} image"
                )
            dots.append((x, y))
    return np.array(dots, dtype=np.float64).reshape(-1, 2)


def load_scene(image_path, annotation_path, scene_id=None, mode_label=None):
    image = read_pgm(image_path)
    h, w = image.shape
    dots = read_annotations(annotation_path, w, h)
    if scene_id is None:
        scene_id = os.path.splitext(os.path.basename(image_path))[0]
    return Scene(id=scene_id, image=image, dots=dots, mode_label=mode_label)


def write_annotations(path, dots):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in dots:
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def write_manifest(path, entries):
    """entries: (scene_id, image_path, annotation_path, mode_label-or-None)."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            sid, img, ann, label = entry
            line = f"{sid} {img} {ann}"
            if label:
                line += f" {label}"
            fh.write(line + "\n")


def load_manifest(path):
    """Load every scene listed in a manifest; paths resolve relative to it."""
    base = os.path.dirname(os.path.abspath(path))
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ParseError(f"{path}:{lineno}: expected 'id image annotations [mode]'")
            sid, img, ann = parts[:3]
            label = parts[3] if len(parts) == 4 else None
            scenes.append(load_scene(os.path.join(base, img), os.path.join(base, ann),
                                     scene_id=sid, mode_label=label))
    return scenes


# ---------------------------------------------------------------------------
# density maps and patch targets
# ---------------------------------------------------------------------------

def render_density(scene, sigma=DEFAULT_SIGMA):
    """Sum one truncated unit-mass Gaussian per dot into an (H, W) map."""
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    h, w = scene.image.shape
    values = np.zeros((h, w), dtype=np.float64)
    radius = 4.0 * sigma
    half = int(np.ceil(radius))
    norm_half = int(np.ceil(8.0 * sigma))  # wide enough that the tail is ~1e-14
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for x, y in scene.dots:
        cx, cy = int(np.floor(x)), int(np.floor(y))
        # normalization over the (effectively) untruncated grid, separable
        jj = np.arange(cx - norm_half, cx + norm_half + 1, dtype=np.float64)
        ii = np.arange(cy - norm_half, cy + norm_half + 1, dtype=np.float64)
        sx = np.exp(-((jj - x) ** 2) * inv2s2).sum()
        sy = np.exp(-((ii - y) ** 2) * inv2s2).sum()
        j0, j1 = cx - half, cx + half + 1
        i0, i1 = cy - half, cy + half + 1
        jwin = np.arange(j0, j1, dtype=np.float64)
        iwin = np.arange(i0, i1, dtype=np.float64)
        dx2 = (jwin - x) ** 2
        dy2 = (iwin - y) ** 2
        kernel = np.exp(-(dy2[:, None] + dx2[None, :]) * inv2s2) / (sx * sy)
        kernel[dy2[:, None] + dx2[None, :] > radius * radius] = 0.0
        # clip the stamp to the image
        ci0, ci1 = max(i0, 0), min(i1, h)
        cj0, cj1 = max(j0, 0), min(j1, w)
        if ci0 >= ci1 or cj0 >= cj1:
            continue
        values[ci0:ci1, cj0:cj1] += kernel[ci0 - i0:ci1 - i0, cj0 - j0:cj1 - j0]
    return DensityMap(values=values, sigma=sigma)


def grid_offsets(height, width):
    """Top-left corners of the non-overlapping patch grid; remainders excluded."""
    if height < PATCH_SIZE or width < PATCH_SIZE:
        raise ValidationError(f"image {height}x{width} smaller than patch size {PATCH_SIZE}")
    return [
        (x * PATCH_SIZE, y * PATCH_SIZE)
        for y in range(height // PATCH_SIZE)
        for x in range(width // PATCH_SIZE)
    ]


def _cut_patch(scene, density, x0, y0):
    patch = scene.image[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE][None, :, :]
    target = float(density.values[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE].sum())
    return PatchSample(patch=np.ascontiguousarray(patch), target=target,
                       origin=(scene.id, x0, y0))


def grid_partition(scene, density):
    """Tile the scene into grid patches with density-sum targets."""
    h, w = scene.image.shape
    return [_cut_patch(scene, density, x0, y0) for x0, y0 in grid_offsets(h, w)]


def random_crops(scene, density, count, rng):
    """`count` patches at uniformly random valid offsets (x drawn, then y)."""
    h, w = scene.image.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise ValidationError(f"image {h}x{w} smaller than patch size {PATCH_SIZE}")
    if count < 1:
        raise ConfigurationError("crop count must be >= 1")
    out = []
    for _ in range(count):
        x0 = int(rng.integers(0, w - PATCH_SIZE + 1))
        y0 = int(rng.integers(0, h - PATCH_SIZE + 1))
        out.append(_cut_patch(scene, density, x0, y0))
    return out


def kfold_split(scene_ids, k, seed):
    """Seeded random partition into k near-equal disjoint folds."""
    ids = list(scene_ids)
    if k < 2:
        raise ConfigurationError("k-fold split needs k >= 2")
    if k > len(ids):
        raise ConfigurationError(f"cannot split {len(ids)} scenes into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [[] for _ in range(k)]
    base, extra = divmod(len(ids), k)
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds[i] = [ids[j] for j in order[pos:pos + size]]
        pos += size
    return folds


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthMode:
    name: str
    radius: tuple                       # (lo, hi) blob radius in px
    count: tuple                        # (lo, hi) dots per scene, inclusive
    weight: float = 1.0
    brightness: tuple = (0.55, 0.9)     # (lo, hi) blob intensity over background


@dataclass(frozen=True)
class SynthConfig:
    modes: tuple
    size: tuple = (144, 144)
    margin: float = 4.0 * DEFAULT_SIGMA   # dots stay this far from every border
    max_place_attempts: int = 2000


def modes3():
    """Default desk-scale benchmark: three appearance modes spanning the
    scale/congestion axes (many small blobs .. few large ones).

    Brightness falls with blob size, so integrated intensity maps to a count
    differently in every mode: small targets are compact and high-contrast,
    large ones are spread out and faint. A counter must condition on
    appearance to calibrate; summed brightness alone misreads across modes.
    """
    return SynthConfig(modes=(
        SynthMode("small-dense", radius=(2.0, 3.0), count=(40, 60), brightness=(0.65, 0.95)),
        SynthMode("medium", radius=(4.0, 6.0), count=(10, 20), brightness=(0.40, 0.70)),
        SynthMode("large-sparse", radius=(8.0, 12.0), count=(2, 6), brightness=(0.16, 0.36)),
    ))


SYNTH_PRESETS = {"modes3": modes3}


def load_synth_modes(path):
    """Mode file: one 'name r_lo r_hi n_lo n_hi [weight [b_lo b_hi]]' line per mode."""
    modes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (5, 6, 8):
                raise ParseError(
                    f"{path}:{lineno}: expected 'name r_lo r_hi n_lo n_hi [weight [b_lo b_hi]]'")
            try:
                modes.append(SynthMode(
                    parts[0],
                    radius=(float(parts[1]), float(parts[2])),
                    count=(int(parts[3]), int(parts[4])),
                    weight=float(parts[5]) if len(parts) >= 6 else 1.0,
                    brightness=(float(parts[6]), float(parts[7])) if len(parts) == 8
                    else SynthMode.__dataclass_fields__["brightness"].default,
                ))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad number in mode line") from exc
    if not modes:
        raise ParseError(f"{path}: no modes defined")
    return SynthConfig(modes=tuple(modes))


def _validate_synth(config):
    if not config.modes:
        raise ConfigurationError("synthetic config needs at least one mode")
    h, w = config.size
    for m in config.modes:
        if m.radius[0] <= 0 or m.radius[1] < m.radius[0]:
            raise ConfigurationError(f"mode {m.name}: bad radius range {m.radius}")
        if m.count[0] < 0 or m.count[1] < m.count[0]:
            raise ConfigurationError(f"mode {m.name}: bad count range {m.count}")
        if m.weight < 0:
            raise ConfigurationError(f"mode {m.name}: negative weight")
        if not (0 < m.brightness[0] <= m.brightness[1] <= 1.0):
            raise ConfigurationError(f"mode {m.name}: bad brightness range {m.brightness}")
        if 2 * config.margin >= min(h, w) and m.count[1] > 0:
            raise ConfigurationError(f"margin {config.margin} leaves no room for dots in {h}x{w}")


def _place_dots(rng, count, radii, size, margin, max_attempts):
    """Rejection-sample centers with pairwise separation >= r_i + r_j + 1."""
    h, w = size
    xs = np.empty(count)
    ys = np.empty(count)
    placed = 0
    attempts = 0
    budget = max(max_attempts, max_attempts * count)
    while placed < count:
        if attempts >= budget:
            raise ConfigurationError(
                f"could not place {count} non-overlapping blobs in {h}x{w} "
                f"(margin {margin}); mode configuration infeasible"
            )
        attempts += 1
        x = rng.uniform(margin, w - margin)
        y = rng.uniform(margin, h - margin)
        ok = True
        for j in range(placed):
            min_sep = radii[placed] + radii[j] + 1.0
            if (x - xs[j]) ** 2 + (y - ys[j]) ** 2 < min_sep * min_sep:
                ok = False
                break
        if ok:
            xs[placed] = x
            ys[placed] = y
            placed += 1
    return xs, ys


def _smooth_noise(rng, h, w, cell=8):
    """Low-frequency texture: coarse uniform noise, bilinearly upsampled."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.random((gh, gw))
    yy = np.arange(h) / cell
    xx = np.arange(w) / cell
    iy = yy.astype(int)
    ix = xx.astype(int)
    fy = (yy - iy)[:, None]
    fx = (xx - ix)[None, :]
    tl = coarse[np.ix_(iy, ix)]
    tr = coarse[np.ix_(iy, ix + 1)]
    bl = coarse[np.ix_(iy + 1, ix)]
    br = coarse[np.ix_(iy + 1, ix + 1)]
    return tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx + bl * fy * (1 - fx) + br * fy * fx


def synth_generate(config, n_scenes, seed):
    """Generate seeded synthetic scenes: bright anti-aliased blobs on textured
    background noise. Scene i derives its rng from SeedSequence([seed, i]), so
    scenes are reproducible independently of generation order."""
    _validate_synth(config)
    h, w = config.size
    weights = np.array([m.weight for m in config.modes], dtype=np.float64)
    if weights.sum() <= 0:
        raise ConfigurationError("mode weights sum to zero")
    weights = weights / weights.sum()
    scenes = []
    for i in range(n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(i)]))
        mode = config.modes[int(rng.choice(len(config.modes), p=weights))]
        count = int(rng.integers(mode.count[0], mode.count[1] + 1))
        radii = rng.uniform(mode.radius[0], mode.radius[1], size=count)
        if count > 0:
            xs, ys = _place_dots(rng, count, radii, config.size, config.margin,
                                 config.max_place_attempts)
        else:
            xs = ys = np.empty(0)
        image = 0.08 + 0.10 * _smooth_noise(rng, h, w) + 0.02 * rng.random((h, w))
        yy = np.arange(h, dtype=np.float64)[:, None]
        xx = np.arange(w, dtype=np.float64)[None, :]
        for x, y, r in zip(xs, ys, radii):
            brightness = rng.uniform(mode.brightness[0], mode.brightness[1])
            lo_y, hi_y = max(int(y - r - 2), 0), min(int(y + r + 3), h)
            lo_x, hi_x = max(int(x - r - 2), 0), min(int(x + r + 3), w)
            d = np.sqrt((yy[lo_y:hi_y] - y) ** 2 + (xx[:, lo_x:hi_x] - x) ** 2)
            profile = np.clip(r + 0.5 - d, 0.0, 1.0)  # anti-aliased disk edge
            image[lo_y:hi_y, lo_x:hi_x] += brightness * profile
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        dots = np.stack([xs, ys], axis=1) if count else np.empty((0, 2))
        scenes.append(Scene(id=f"synth-{i:04d}", image=image, dots=dots,
                            mode_label=mode.name))
    return scenes


def save_dataset(scenes, out_dir):
    """Write scenes as PGM + annotation pairs plus a manifest.txt; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for scene in scenes:
        img = f"{scene.id}.pgm"
        ann = f"{scene.id}.txt"
        write_pgm(os.path.join(out_dir, img), scene.image)
        write_annotations(os.path.join(out_dir, ann), scene.dots)
        entries.append((scene.id, img, ann, scene.mode_label))
    manifest = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest, entries)
    return manifest


def build_training_patches(scenes, crops_per_scene, sigma, seed):
    """Random crops over all scenes; scene i's crops use SeedSequence([seed, i])."""
    patches = []
    for i, scene in enumerate(scenes):
        density = render_density(scene, sigma)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(i)]))
        patches.extend(random_crops(scene, density, crops_per_scene, rng))
    return patches
