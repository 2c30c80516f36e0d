"""Paired CFP/FAF data: synthetic generation, manifest ingestion, splitting, augmentation.

The dataset unit is one CFP-FAF pair from one eye at one visit. Labels for
each feature (rpd, ga, pigment) are 0, 1 or NA; a label graded on either
modality applies to the pair.
"""
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["participant_id", "eye", "visit", "cfp_path", "faf_path", "rpd", "ga", "pigment"]
GROUND_TRUTH_HEADER = ["record_id", "lesion_count", "mask_path"]
FEATURES = ("rpd", "ga", "pigment")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ExamRecord:
    participant_id: str
    eye: str
    visit: str
    cfp_path: str
    faf_path: str
    labels: dict = field(default_factory=dict)

    @property
    def record_id(self):
        return f"{self.participant_id}_{self.eye}_{self.visit}"

    def label(self, feature):
        return self.labels.get(feature)


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    n_participants: int = 500
    visits_per_participant: int = 2
    image_size: int = 64
    prevalence: float = 0.28
    lesion_count_range: tuple = (0, 12)
    faf_contrast: float = 0.3
    cfp_contrast: float = 0.08
    noise_sigma: float = 0.03
    distractor_count_range: tuple = (2, 10)
    ga_prevalence: float = 0.1
    pigment_prevalence: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.lesion_count_range = tuple(int(v) for v in self.lesion_count_range)
        self.distractor_count_range = tuple(int(v) for v in self.distractor_count_range)
        self.validate()

    def validate(self):
        def bad(name, why):
            raise ValueError(f"{name}: {why} (got {getattr(self, name)!r})")

        if self.n_participants < 1:
            bad("n_participants", "must be >= 1")
        if self.visits_per_participant < 1:
            bad("visits_per_participant", "must be >= 1")
        if self.image_size < 16:
            bad("image_size", "must be >= 16")
        if not 0 < self.prevalence < 1:
            bad("prevalence", "must lie strictly between 0 and 1")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            bad("lesion_count_range", "must be (lo, hi) with 0 <= lo <= hi")
        lo, hi = self.distractor_count_range
        if lo < 0 or hi < lo:
            bad("distractor_count_range", "must be (lo, hi) with 0 <= lo <= hi")
        if not 0 <= self.cfp_contrast < self.faf_contrast:
            bad("faf_contrast", "must exceed cfp_contrast")
        if self.noise_sigma < 0:
            bad("noise_sigma", "must be >= 0")
        for name in ("ga_prevalence", "pigment_prevalence"):
            if not 0 <= getattr(self, name) <= 1:
                bad(name, "must lie in [0, 1]")

    @property
    def n_records(self):
        return self.n_participants * 2 * self.visits_per_participant

    def to_dict(self):
        d = asdict(self)
        d["lesion_count_range"] = list(self.lesion_count_range)
        d["distractor_count_range"] = list(self.distractor_count_range)
        return d


RPD_MIN_LESIONS = 5
LESION_RADIUS = 0.028  # fraction of the image side
# RGB increments per unit of cfp_contrast: lesions are yellow, distractors pale blue.
# At the default contrast a lesion adds ~0.32 to red, against ~0.3 darkening on FAF.
CFP_LESION_HUE = (4.0, 3.2, 0.8)
CFP_DISTRACTOR_HUE = (0.8, 1.6, 2.5)


@dataclass
class Anatomy:
    """Shared latent geometry rendered into both modalities."""

    size: int
    background: np.ndarray
    vessels: np.ndarray
    disc_center: tuple
    lesions: list  # (y, x, radius)
    distractors: list  # (y, x, radius), CFP only
    ga: bool
    pigment: list  # (y, x, radius, sign)


def _disc(size, y, x, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy + 0.5 - y) ** 2 + (xx + 0.5 - x) ** 2 <= r * r


def _blob(size, y, x, r):
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy + 0.5 - y) ** 2 + (xx + 0.5 - x) ** 2
    return np.exp(-d2 / (2 * (0.6 * r) ** 2)) * (d2 <= (1.6 * r) ** 2)


def _fundus_mask(size):
    c = size / 2
    return _disc(size, c, c, 0.48 * size)


def _sample_annulus(rng, size, n, radius, placed, lo=0.2, hi=0.4, min_gap=2.2):
    """Points in the peripheral annulus, kept apart so discs stay countable."""
    c = size / 2
    out = []
    tries = 0
    while len(out) < n and tries < 2000:
        tries += 1
        rho = rng.uniform(lo, hi) * size
        th = rng.uniform(0, 2 * math.pi)
        y, x = c + rho * math.sin(th), c + rho * math.cos(th)
        if all((y - py) ** 2 + (x - px) ** 2 >= (min_gap * max(radius, pr)) ** 2 for py, px, pr in placed + out):
            out.append((y, x, radius))
    return out


def sample_anatomy(rng, cfg, lesion_count, ga, pigment):
    s = cfg.image_size
    lowres = rng.normal(0, 1, size=(4, 4))
    background = ndimage.zoom(lowres, s / 4, order=3)[:s, :s]
    background = background / (np.abs(background).max() + 1e-9)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    side = rng.choice([-1, 1])
    disc_center = (s / 2 + rng.uniform(-0.03, 0.03) * s, s / 2 + side * 0.3 * s)
    pts = []
    for _ in range(4):
        # arcs leaving the optic disc
        a = rng.uniform(-0.9, 0.9)
        curv = rng.uniform(-0.02, 0.02)
        t = np.linspace(0, 1, 50)
        pts.append(np.stack([disc_center[0] + a * t * 0.5 * s + curv * (t * s) ** 2 * 0.5, disc_center[1] - side * t * 0.8 * s], 1))
    pts = np.concatenate(pts)
    d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    vessels = np.exp(-d2.min(axis=-1) / (2 * (0.012 * s) ** 2))
    radius = max(1.0, LESION_RADIUS * s)
    # the optic disc is entered as an occupied spot so nothing is drawn over it
    optic = [(disc_center[0], disc_center[1], 0.06 * s)]
    lesions = _sample_annulus(rng, s, lesion_count, radius, optic)
    d_lo, d_hi = cfg.distractor_count_range
    distractors = _sample_annulus(rng, s, int(rng.integers(d_lo, d_hi + 1)), radius, optic + lesions)
    pig = []
    if pigment:
        for _ in range(int(rng.integers(2, 5))):
            pig.append(
                (s / 2 + rng.uniform(-0.15, 0.15) * s, s / 2 + rng.uniform(-0.15, 0.15) * s, 0.03 * s, rng.choice([-1, 1]))
            )
    return Anatomy(s, background, vessels, disc_center, lesions, distractors, ga, pig)


def lesion_mask(anat):
    m = np.zeros((anat.size, anat.size), dtype=bool)
    for y, x, r in anat.lesions:
        m |= _disc(anat.size, y, x, r)
    return m


def render_faf(anat, cfg, rng):
    s = anat.size
    img = 0.42 + 0.08 * anat.background - 0.22 * anat.vessels
    img -= 0.25 * _blob(s, *anat.disc_center, 0.09 * s)
    for y, x, r in anat.lesions:
        img -= cfg.faf_contrast * _blob(s, y, x, r)
    if anat.ga:
        img -= 0.3 * _disc(s, s / 2, s / 2, 0.12 * s)
    for y, x, r, sign in anat.pigment:
        img += 0.15 * sign * _blob(s, y, x, r)
    img = img + rng.normal(0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0, 1) * _fundus_mask(s)
    return img[..., None], lesion_mask(anat)


def render_cfp(anat, cfg, rng):
    s = anat.size
    tint = np.array([0.78, 0.42, 0.2])
    img = tint * (0.85 + 0.1 * anat.background)[..., None]
    img -= np.array([0.25, 0.2, 0.1]) * anat.vessels[..., None]
    img += np.array([0.2, 0.35, 0.3]) * _blob(s, *anat.disc_center, 0.09 * s)[..., None]
    # RPD are barely visible on colour photographs: faint yellowish discs
    for y, x, r in anat.lesions:
        img += cfg.cfp_contrast * np.array(CFP_LESION_HUE) * _blob(s, y, x, r)[..., None]
    # drusen-like distractors of the same size, pale bluish hue
    for y, x, r in anat.distractors:
        img += cfg.cfp_contrast * np.array(CFP_DISTRACTOR_HUE) * _blob(s, y, x, r)[..., None]
    if anat.ga:
        img += np.array([0.1, 0.15, 0.15]) * _disc(s, s / 2, s / 2, 0.12 * s)[..., None]
    for y, x, r, sign in anat.pigment:
        img += 0.12 * sign * _blob(s, y, x, r)[..., None]
    img = img + rng.normal(0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0, 1) * _fundus_mask(s)[..., None]
    return img, lesion_mask(anat)


def render_pair(cfg, index, lesion_count, ga=False, pigment=False):
    """Render one record: (cfp HxWx3, faf HxWx1, cfp lesion mask, faf lesion mask)."""
    rng = np.random.default_rng([cfg.seed, index, 1])
    anat = sample_anatomy(rng, cfg, lesion_count, ga, pigment)
    cfp, m_cfp = render_cfp(anat, cfg, np.random.default_rng([cfg.seed, index, 2]))
    faf, m_faf = render_faf(anat, cfg, np.random.default_rng([cfg.seed, index, 3]))
    return cfp, faf, m_cfp, m_faf


def _draw_labels(cfg):
    n = cfg.n_records
    rng = np.random.default_rng([cfg.seed, 0])
    n_pos = int(round(cfg.prevalence * n))
    target = np.zeros(n, dtype=bool)
    target[rng.permutation(n)[:n_pos]] = True
    lo, hi = cfg.lesion_count_range
    counts = np.empty(n, dtype=int)
    for i in range(n):
        pos_lo, neg_hi = max(lo, RPD_MIN_LESIONS), min(hi, RPD_MIN_LESIONS - 1)
        if target[i] and pos_lo <= hi:
            counts[i] = rng.integers(pos_lo, hi + 1)
        elif not target[i] and lo <= neg_hi:
            counts[i] = rng.integers(lo, neg_hi + 1)
        else:
            counts[i] = rng.integers(lo, hi + 1)
    ga = rng.random(n) < cfg.ga_prevalence
    pig = rng.random(n) < cfg.pigment_prevalence
    return counts, ga, pig


def to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_png(path, img):
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def generate_synthetic(cfg, out_dir):
    """Render the synthetic corpus and write manifest + ground-truth sidecar.

    Returns the list of :class:`ExamRecord`. Paths in the manifest are
    relative to ``out_dir``.
    """
    cfg.validate()
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir!r}: {exc}") from exc
    counts, ga, pig = _draw_labels(cfg)
    records, truth = [], []
    idx = 0
    for p in range(cfg.n_participants):
        pid = f"P{p + 1:05d}"
        for eye in ("left", "right"):
            for v in range(cfg.visits_per_participant):
                visit = f"v{v + 1}"
                rec = ExamRecord(
                    pid,
                    eye,
                    visit,
                    f"images/{pid}_{eye}_{visit}_cfp.png",
                    f"images/{pid}_{eye}_{visit}_faf.png",
                    {
                        "rpd": int(counts[idx] >= RPD_MIN_LESIONS),
                        "ga": int(ga[idx]),
                        "pigment": int(pig[idx]),
                    },
                )
                cfp, faf, mask, _ = render_pair(cfg, idx, int(counts[idx]), bool(ga[idx]), bool(pig[idx]))
                save_png(os.path.join(out_dir, rec.cfp_path), cfp)
                save_png(os.path.join(out_dir, rec.faf_path), faf)
                mask_path = f"masks/{rec.record_id}_mask.png"
                save_png(os.path.join(out_dir, mask_path), mask.astype(float))
                records.append(rec)
                truth.append((rec.record_id, int(counts[idx]), mask_path))
                idx += 1
    write_manifest(os.path.join(out_dir, "manifest.csv"), records)
    with open(os.path.join(out_dir, "ground_truth.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUND_TRUTH_HEADER)
        w.writerows(truth)
    return records


def write_manifest(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            labels = ["NA" if r.labels.get(f) is None else str(r.labels[f]) for f in FEATURES]
            w.writerow([r.participant_id, r.eye, r.visit, r.cfp_path, r.faf_path, *labels])


# ---------------------------------------------------------------- manifests


def _parse_label(text):
    t = text.strip()
    if t in ("0", "1"):
        return int(t)
    if t.upper() in ("NA", ""):
        return None
    raise ValueError(f"label must be 0, 1 or NA, got {text!r}")


def load_manifest(path, check_images=True):
    """Read and validate a manifest CSV; every problem row is reported at once."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = list(reader)
    records, problems, seen = [], [], {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(MANIFEST_HEADER):
            problems.append(f"row {lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(row)}")
            continue
        pid, eye, visit, cfp, faf, *labs = (c.strip() for c in row)
        errs = []
        if not pid:
            errs.append("empty participant_id")
        if eye not in ("left", "right"):
            errs.append(f"eye must be left or right, got {eye!r}")
        labels = {}
        for feat, text in zip(FEATURES, labs):
            try:
                labels[feat] = _parse_label(text)
            except ValueError as exc:
                errs.append(f"{feat}: {exc}")
        paths = []
        for col, rel in (("cfp_path", cfp), ("faf_path", faf)):
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if not rel:
                errs.append(f"{col} is empty")
            elif not os.path.isfile(full):
                errs.append(f"{col} file not found: {rel}")
            elif check_images:
                try:
                    with Image.open(full) as im:
                        im.verify()
                except Exception as exc:  # noqa: BLE001 - PIL raises many types
                    errs.append(f"{col} not a decodable image: {rel} ({exc})")
            paths.append(full)
        key = (pid, eye, visit)
        if key in seen:
            errs.append(f"duplicate (participant_id, eye, visit) {key}, first seen on row {seen[key]}")
        else:
            seen[key] = lineno
        if errs:
            problems.append(f"row {lineno}: " + "; ".join(errs))
            continue
        records.append(ExamRecord(pid, eye, visit, paths[0], paths[1], labels))
    if problems:
        raise ManifestError(f"{path}: {len(problems)} bad row(s):\n  " + "\n  ".join(problems))
    return records


def select_feature(records, feature):
    """Keep records with a 0/1 label for ``feature``; NA records are dropped and counted."""
    if feature not in FEATURES:
        raise ValueError(f"feature must be one of {FEATURES}, got {feature!r}")
    kept = [r for r in records if r.labels.get(feature) is not None]
    dropped = len(records) - len(kept)
    if dropped:
        log.info("feature %s: excluded %d record(s) with NA label", feature, dropped)
    return kept


def resize_bilinear(img, size):
    """Bilinear resize of an HxW or HxWxC array to ``size`` (square int or (h, w)), pixel-centre aligned."""
    h_out, w_out = (size, size) if np.isscalar(size) else size
    h, w = img.shape[:2]
    if (h, w) == (h_out, w_out):
        return img.copy()
    ys = (np.arange(h_out) + 0.5) * h / h_out - 0.5
    xs = (np.arange(w_out) + 0.5) * w / w_out - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest") for c in range(img.shape[2])], axis=-1
    )


def read_image(path, channels, size):
    with Image.open(path) as im:
        if channels == 1:
            arr = np.asarray(im.convert("L"), dtype=np.float64)[..., None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    arr = arr / 255.0
    return np.clip(resize_bilinear(arr, size), 0, 1)


def load_arrays(records, input_size=64, cfp_channels=3, faf_channels=1, feature="rpd", dtype=np.float32):
    """Decode and resize every pair. Returns (cfp, faf, labels) with NA labels as -1."""
    n = len(records)
    cfp = np.empty((n, input_size, input_size, cfp_channels), dtype=dtype)
    faf = np.empty((n, input_size, input_size, faf_channels), dtype=dtype)
    labels = np.empty(n, dtype=np.int64)
    for i, r in enumerate(records):
        cfp[i] = read_image(r.cfp_path, cfp_channels, input_size)
        faf[i] = read_image(r.faf_path, faf_channels, input_size)
        lab = r.labels.get(feature)
        labels[i] = -1 if lab is None else lab
    return cfp, faf, labels


# ---------------------------------------------------------------- splitting


def split_participants(records, fractions=(0.70, 0.10, 0.20), seed=0):
    """Random participant-level partition into train/val/test.

    Returns ``{participant_id: split}``. Split sizes are the rounded target
    fractions of the participant count, with the test split taking the
    remainder and every split kept non-empty.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    pids = sorted({r.participant_id if isinstance(r, ExamRecord) else r for r in records})
    n = len(pids)
    if n < 3:
        raise ValueError(f"need at least 3 participants to split, got {n}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    sizes = [n_train, n_val, n - n_train - n_val]
    for i in range(3):
        while sizes[i] < 1:
            j = int(np.argmax(sizes))
            sizes[j] -= 1
            sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    out = {}
    start = 0
    for name, k in zip(SPLITS, sizes):
        for idx in order[start : start + k]:
            out[pids[idx]] = name
        start += k
    return out


def split_indices(records, assignment):
    """Record indices per split, in manifest order."""
    out = {s: [] for s in SPLITS}
    for i, r in enumerate(records):
        out[assignment[r.participant_id]].append(i)
    return {s: np.asarray(v, dtype=np.int64) for s, v in out.items()}


def write_splits(path, assignment):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "split"])
        for pid in sorted(assignment):
            w.writerow([pid, assignment[pid]])


def read_splits(path):
    with open(path, newline="") as fh:
        return {row["participant_id"]: row["split"] for row in csv.DictReader(fh)}


# ---------------------------------------------------------------- augmentation


def rotate(img, angle):
    """Rotate an HxW or HxWxC image about its centre; bilinear, zero fill."""
    if angle == 0:
        return img.copy()
    planes = img[..., None] if img.ndim == 2 else img
    out = np.empty(planes.shape, dtype=np.float32)
    for c in range(planes.shape[-1]):
        plane = Image.fromarray(np.ascontiguousarray(planes[..., c], dtype=np.float32), mode="F")
        out[..., c] = np.asarray(plane.rotate(angle, resample=Image.BILINEAR, fillcolor=0.0))
    out = np.clip(out, 0, 1).astype(img.dtype, copy=False)
    return out[..., 0] if img.ndim == 2 else out


def hflip(img):
    return img[:, ::-1].copy()


def vflip(img):
    return img[::-1].copy()


def sample_transform(rng):
    return float(rng.uniform(0.0, 180.0)), bool(rng.random() < 0.5), bool(rng.random() < 0.5)


def apply_transform(img, transform):
    angle, h, v = transform
    out = rotate(img, angle)
    if h:
        out = out[:, ::-1]
    if v:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment_pair(cfp, faf, rng):
    """Apply one sampled rotation/flip combination identically to both images."""
    t = sample_transform(rng)
    return apply_transform(cfp, t), apply_transform(faf, t)
