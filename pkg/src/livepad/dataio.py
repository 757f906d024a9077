"""Dataset manifests, protocol-aware splits and the procedural stand-in corpus.

Manifests are JSON lines with exactly the fields
``id, class, pai_species, subject, split, path``. An optional first line
``{"_provenance": {...}}`` carries the corpus name and generator seed.

Protocol rules enforced everywhere:

* ``class == "attack"`` never appears in the train split;
* a subject id appears in at most one split.

The generator draws 32x32 ridge textures. Live samples are oriented
sinusoids with per-subject frequency, orientation, phase and curvature.
The synthetic class adds a smooth warp and an amplitude perturbation.
Pseudo-PAI species corrupt live fields of held-out subjects.
"""

import json
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ProtocolError, UsageError
from .metrics import CLARKSON_SPECIES, COLFISPOOF_SPECIES
from .tensor import load_tensor, save_tensor

CLASSES = ("live", "synthetic", "attack")
SPLITS = ("train", "val", "test")
KNOWN_SPECIES = frozenset(CLARKSON_SPECIES) | frozenset(COLFISPOOF_SPECIES)
FIELDS = ("id", "class", "pai_species", "subject", "split", "path")

# pseudo-PAI corruptions of live fields; "synthetic" may also be requested as
# a held-out test species
PSEUDO_SPECIES = ("ecoflex", "photopaper", "playdoh", "woodglue")


class ManifestError(UsageError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class SampleRecord:
    id: str
    cls: str
    pai_species: str = None
    subject: str = None
    split: str = None
    path: str = None

    def to_json(self):
        d = {
            "id": self.id,
            "class": self.cls,
            "pai_species": self.pai_species,
            "subject": self.subject,
            "split": self.split,
            "path": self.path,
        }
        return json.dumps(d, ensure_ascii=False)

    def problems(self):
        """Returns (format problems, protocol problems)."""
        fmt, proto = [], []
        if not self.id:
            fmt.append("empty id")
        if self.cls not in CLASSES:
            fmt.append(f"unknown class {self.cls!r}")
        if self.split is not None and self.split not in SPLITS:
            fmt.append(f"unknown split {self.split!r}")
        if self.cls == "attack" and not self.pai_species:
            fmt.append("attack record without pai_species")
        if self.cls == "live" and not self.subject:
            fmt.append("live record without subject")
        if self.cls == "attack" and self.split == "train":
            proto.append(f"attack record {self.id!r} assigned to the train split")
        return fmt, proto


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def dumps(self):
        lines = []
        if self.provenance:
            lines.append(json.dumps({"_provenance": self.provenance}, sort_keys=True))
        lines += [r.to_json() for r in self.records]
        return "".join(line + "\n" for line in lines)

    def counts(self):
        """Totals per class and per attack species."""
        out = {}
        for r in self.records:
            key = f"attack:{r.pai_species}" if r.cls == "attack" else r.cls
            out[key] = out.get(key, 0) + 1
        return dict(sorted(out.items()))

    def subjects(self):
        return sorted({r.subject for r in self.records if r.subject})

    def select(self, split=None, classes=None):
        return [
            r
            for r in self.records
            if (split is None or r.split == split) and (classes is None or r.cls in classes)
        ]

    def validate(self):
        check_protocol(self.records)
        return self


def check_protocol(records):
    problems = []
    for r in records:
        problems += r.problems()[1]
    owner = {}
    for r in records:
        if r.subject and r.split:
            prev = owner.setdefault(r.subject, r.split)
            if prev != r.split:
                problems.append(f"subject {r.subject!r} appears in splits {prev!r} and {r.split!r}")
                owner[r.subject] = r.split
    if problems:
        raise ProtocolError("; ".join(dict.fromkeys(problems)))


def parse_manifest(text):
    """Parse and validate JSON-lines manifest text.

    Format problems raise ManifestError, protocol violations ProtocolError;
    both list every offending line. Unknown species warn and are kept.
    """
    records, provenance = [], {}
    fmt_errors, proto_errors = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            fmt_errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(obj, dict):
            fmt_errors.append(f"line {lineno}: expected an object")
            continue
        if set(obj) == {"_provenance"}:
            provenance = dict(obj["_provenance"])
            continue
        if set(obj) != set(FIELDS):
            fmt_errors.append(f"line {lineno}: fields must be exactly {', '.join(FIELDS)}")
            continue
        rec = SampleRecord(
            id=str(obj["id"]),
            cls=obj["class"],
            pai_species=obj["pai_species"],
            subject=obj["subject"],
            split=obj["split"],
            path=obj["path"],
        )
        fmt, proto = rec.problems()
        fmt_errors += [f"line {lineno}: {p}" for p in fmt]
        proto_errors += [f"line {lineno}: {p}" for p in proto]
        if rec.pai_species and rec.pai_species not in KNOWN_SPECIES:
            warnings.warn(f"line {lineno}: unknown PAI species {rec.pai_species!r} kept as custom")
        records.append(rec)
    if proto_errors:
        raise ProtocolError("; ".join(proto_errors))
    if fmt_errors:
        raise ManifestError(fmt_errors)
    manifest = DatasetManifest(records, provenance)
    manifest.validate()
    return manifest


def read_manifest(path):
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def write_manifest(path, manifest):
    Path(path).write_text(manifest.dumps(), encoding="utf-8")


# ---------------------------------------------------------------------------
# splits


def split_counts(n, ratios):
    """Subjects per split: later splits get floor(n * r), train the remainder."""
    names = list(ratios)
    if any(r < 0 for r in ratios.values()) or sum(ratios.values()) <= 0:
        raise UsageError(f"invalid split ratios {ratios}")
    total = sum(ratios.values())
    counts = {k: int(np.floor(n * ratios[k] / total + 1e-12)) for k in names[1:]}
    counts[names[0]] = n - sum(counts.values())
    wanted = [k for k in names if ratios[k] > 0]
    if n < len(wanted) or any(counts[k] < 1 for k in wanted):
        raise UsageError(f"{n} subjects cannot fill splits {wanted} with ratios {ratios}")
    return {k: counts[k] for k in names}


DEFAULT_RATIOS = {"train": 0.6, "val": 0.2, "test": 0.2}


def make_splits(manifest, ratios=None, seed=0, synthetic_train=0.8):
    """Assign splits: subjects partitioned by seeded shuffle, attacks to test,
    synthetic records divided between train and val."""
    ratios = dict(DEFAULT_RATIOS if ratios is None else ratios)
    unknown = set(ratios) - set(SPLITS)
    if unknown or "train" not in ratios:
        raise UsageError(f"ratios must name splits from {SPLITS} including train: {ratios}")
    ratios = {k: ratios[k] for k in SPLITS if k in ratios}
    subjects = manifest.subjects()
    if not subjects:
        raise UsageError("manifest has no subject ids to split")
    counts = split_counts(len(subjects), ratios)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    assign, pos = {}, 0
    for name, n in counts.items():
        for subj in order[pos : pos + n]:
            assign[subj] = name
        pos += n

    synth = [r.id for r in manifest.records if r.cls == "synthetic"]
    perm = rng.permutation(len(synth))
    n_train = int(np.floor(len(synth) * synthetic_train + 1e-12))
    synth_split = {synth[i]: ("train" if k < n_train else "val") for k, i in enumerate(perm)}

    out = []
    for r in manifest.records:
        if r.cls == "attack":
            split = "test"
        elif r.cls == "synthetic":
            split = synth_split[r.id]
        else:
            split = assign[r.subject]
        out.append(replace(r, split=split))
    result = DatasetManifest(out, dict(manifest.provenance))
    result.validate()
    return result


# ---------------------------------------------------------------------------
# procedural generator


@dataclass(frozen=True)
class GeneratorConfig:
    subjects: int = 26
    per_subject: int = 20
    synthetic: int = None  # default: same as total live count
    attacks_per_species: int = 40
    species: tuple = PSEUDO_SPECIES
    size: int = 32
    noise: float = 0.05
    freq_range: tuple = (0.12, 0.2)
    curvature_range: tuple = (-0.006, 0.006)
    orientation_jitter: float = 0.5
    freq_jitter: float = 0.08
    warp_amplitude: tuple = (1.0, 2.5)
    gain: tuple = (0.05, 0.5)  # |log contrast gain|, sign drawn at random
    amplitude_perturbation: tuple = (0.0, 0.5)
    grain: tuple = (0.05, 0.6)
    blur_sigma: tuple = (1.0, 1.6)
    quantize_levels: tuple = (2, 3)
    contrast: tuple = (0.2, 0.45)
    speckle: tuple = (0.3, 0.6)
    ratios: tuple = (("train", 0.6), ("val", 0.2), ("test", 0.2))
    synthetic_train: float = 0.8

    def to_dict(self):
        d = asdict(self)
        return {f"gen.{k}": (",".join(map(str, v)) if isinstance(v, (tuple, list)) else v)
                for k, v in d.items() if v is not None}


def record_rng(seed, record_id):
    """Per-record generator stream derived from (master seed, id)."""
    key = zlib.crc32(record_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, 3, key]))


def subject_params(seed, subject, cfg):
    rng = record_rng(seed, f"subject:{subject}")
    return {
        "freq": rng.uniform(*cfg.freq_range),
        "theta": rng.uniform(0, np.pi),
        "phase": rng.uniform(0, 2 * np.pi),
        "curv": rng.uniform(*cfg.curvature_range),
        "cx": rng.uniform(-8, 8),
        "cy": rng.uniform(-8, 8),
    }


def ridge_field(params, size, rng, jitter=0.5, freq_jitter=0.08, warp=None):
    """Oriented sinusoidal ridges with a quadratic phase term for curvature.

    Each presentation re-draws the ridge phase, the curvature centre offset and
    small orientation / frequency deviations around the subject's values.
    """
    theta = params["theta"] + rng.normal(0, jitter)
    freq = params["freq"] * (1 + rng.normal(0, freq_jitter))
    phase = params["phase"] + rng.uniform(0, 2 * np.pi)
    cx = params["cx"] + rng.uniform(-6, 6)
    cy = params["cy"] + rng.uniform(-6, 6)
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - c
    if warp is not None:
        xx = xx + warp[0]
        yy = yy + warp[1]
    u = xx * np.cos(theta) + yy * np.sin(theta)
    r2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return np.sin(2 * np.pi * freq * u + params["curv"] * r2 + phase)


def smooth_field(rng, size, terms=3, max_freq=1.5):
    """Sum of a few random low-frequency sinusoids, scaled to [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = np.zeros((size, size))
    for _ in range(terms):
        fx, fy = rng.uniform(-max_freq, max_freq, size=2)
        out += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return out / max(np.abs(out).max(), 1e-12)


def render_live(params, rng, cfg):
    img = ridge_field(params, cfg.size, rng, cfg.orientation_jitter, cfg.freq_jitter)
    return img + rng.normal(0, cfg.noise, img.shape)


def render_synthetic(params, rng, cfg):
    amp = rng.uniform(*cfg.warp_amplitude)
    warp = (amp * smooth_field(rng, cfg.size), amp * smooth_field(rng, cfg.size))
    img = ridge_field(params, cfg.size, rng, cfg.orientation_jitter, cfg.freq_jitter, warp)
    # global contrast gain off nominal in either direction, a smooth local
    # modulation, and fine multiplicative grain
    gain = np.exp(rng.choice((-1.0, 1.0)) * rng.uniform(*cfg.gain))
    a = rng.uniform(*cfg.amplitude_perturbation)
    img = img * gain * (1 + a * smooth_field(rng, cfg.size))
    img = img * (1 + rng.uniform(*cfg.grain) * rng.standard_normal(img.shape))
    return img + rng.normal(0, cfg.noise, img.shape)


def corrupt(img, species, rng, cfg):
    """Species-specific corruption of a live field."""
    if species == "photopaper":
        return ndimage.gaussian_filter(img, rng.uniform(*cfg.blur_sigma), mode="reflect")
    if species == "playdoh":
        levels = int(rng.integers(cfg.quantize_levels[0], cfg.quantize_levels[1] + 1))
        q = np.round((np.clip(img, -1, 1) + 1) / 2 * (levels - 1)) / (levels - 1)
        return q * 2 - 1
    if species == "woodglue":
        return img * rng.uniform(*cfg.contrast) + rng.uniform(-0.2, 0.2)
    if species == "ecoflex":
        return img * (1 + rng.normal(0, rng.uniform(*cfg.speckle), img.shape))
    raise UsageError(f"no procedural corruption for species {species!r}")


def render_record(record, seed, cfg):
    """Image for one generated record, reproducible from (seed, id) alone.

    Ids encode the source subject: ``live:<subject>:<k>``,
    ``synthetic:<source subject>:<k>``, ``attack:<species>:<subject>:<k>``.
    """
    rng = record_rng(seed, record.id)
    parts = record.id.split(":")
    if record.cls == "live":
        return render_live(subject_params(seed, record.subject, cfg), rng, cfg)
    if record.cls == "synthetic":
        return render_synthetic(subject_params(seed, parts[1], cfg), rng, cfg)
    params = subject_params(seed, parts[2], cfg)
    if record.pai_species == "synthetic":
        return render_synthetic(params, rng, cfg)
    return corrupt(render_live(params, rng, cfg), record.pai_species, rng, cfg)


def generate_synthetic(cfg, seed):
    """Build the split manifest and its images.

    Returns ``(manifest, images)`` where ``images`` maps record id to a
    (1, size, size) float64 array.
    """
    if cfg.subjects < 1 or cfg.per_subject < 1:
        raise UsageError("subjects and per_subject must be >= 1")
    subjects = [f"s{i:03d}" for i in range(cfg.subjects)]
    records = [
        SampleRecord(id=f"live:{s}:{k:04d}", cls="live", subject=s)
        for s in subjects
        for k in range(cfg.per_subject)
    ]
    n_syn = cfg.subjects * cfg.per_subject if cfg.synthetic is None else cfg.synthetic
    # synthetic samples imitate the live corpus, so each one has a source subject
    records += [
        SampleRecord(id=f"synthetic:{subjects[k % len(subjects)]}:{k:05d}", cls="synthetic")
        for k in range(n_syn)
    ]
    provenance = {"corpus": "procedural", "generator_seed": seed}
    manifest = make_splits(
        DatasetManifest(records, provenance), dict(cfg.ratios), seed, cfg.synthetic_train
    )
    test_subjects = sorted({r.subject for r in manifest.records if r.split == "test" and r.subject})
    if cfg.attacks_per_species and not test_subjects:
        raise UsageError("attack generation needs at least one test subject")
    attacks = []
    for species in cfg.species:
        for k in range(cfg.attacks_per_species):
            subj = test_subjects[k % len(test_subjects)]
            attacks.append(
                SampleRecord(
                    id=f"attack:{species}:{subj}:{k:04d}",
                    cls="attack",
                    pai_species=species,
                    split="test",
                )
            )
    manifest = DatasetManifest(manifest.records + attacks, provenance)
    manifest.validate()
    images = {r.id: render_record(r, seed, cfg)[None, :, :] for r in manifest.records}
    return manifest, images


# ---------------------------------------------------------------------------
# storage


def tensor_filename(record_id):
    return record_id.replace(":", "_") + ".f64"


def write_corpus(root, manifest, images):
    root = Path(root)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    recs = []
    for r in manifest.records:
        rel = f"tensors/{tensor_filename(r.id)}"
        save_tensor(root / rel, images[r.id])
        recs.append(replace(r, path=rel))
    out = DatasetManifest(recs, dict(manifest.provenance))
    write_manifest(root / "manifest.jsonl", out)
    return out


def load_image(root, record):
    if not record.path:
        raise UsageError(f"record {record.id!r} has no path")
    path = Path(root) / record.path
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)[None, :, :]
    return load_tensor(path).data


def load_split(root, manifest, split, classes=None):
    """Stack the images of one split into a LabeledImages bundle."""
    from .training import LabeledImages

    recs = manifest.select(split=split, classes=classes)
    if not recs:
        raise UsageError(f"split {split!r} is empty")
    images = np.stack([load_image(root, r) for r in recs])
    return LabeledImages(
        images=images,
        classes=[r.cls for r in recs],
        ids=[r.id for r in recs],
        species=[r.pai_species for r in recs],
    )


def read_pgm(path):
    """Binary portable graymap (P5, maxval <= 255) scaled to [-1, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise UsageError(f"{path}: only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval <= 255:
        raise UsageError(f"{path}: maxval must be in 1..255")
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.float64) / maxval * 2 - 1


def write_pgm(path, img):
    arr = np.clip(np.round((np.asarray(img) + 1) / 2 * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())
