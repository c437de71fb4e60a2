"""Sample and dataset plumbing: image files, synthetic generators,
manifests, and binary checkpoints.

Label conventions used throughout: class 1 is the structure of interest
(cell interior for membrane-style data, vessel for fundus-style data) and
class 0 is boundary/background.  Label and FOV rasters store class ids
literally as 8-bit values; probability images are scaled to [0,1].
"""

import json
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from acenet.autodiff import AdamState, Tensor
from acenet.errors import (CheckpointConfigError, CheckpointPayloadError,
                           CheckpointVersionError, DataError)
from acenet.graph import Network, NetworkConfig


@dataclass
class LabeledSample:
    """One training/evaluation unit: image in [0,1], integer labels, and an
    optional field-of-view mask restricting evaluation."""

    image: Tensor  # [1, C, H, W]
    labels: np.ndarray  # [H, W] integer class ids
    fov: Optional[np.ndarray]  # [H, W] bool, or None
    id: str

    def spatial_shape(self) -> Tuple[int, int]:
        return self.image.shape[2], self.image.shape[3]


@dataclass
class ManifestEntry:
    image: str
    labels: str
    fov: Optional[str]
    id: str


@dataclass
class DatasetManifest:
    split: str  # "train" | "test"
    channels: int  # 1 or 3
    entries: List[ManifestEntry]
    base_dir: str  # directory the relative paths resolve against


# ------------------------------------------------------------- image io

def load_image(path) -> Tensor:
    """Decode an 8-bit PNG into a [1,C,H,W] tensor scaled to [0,1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P") else "L")
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot decode image {path}: {e}")
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)  # HWC -> CHW, channels are R,G,B
    return Tensor(arr[None].astype(np.float64) / 255.0)


def save_image(tensor, path):
    """Write a [0,1] tensor (or array) of shape [1,C,H,W], [C,H,W] or [H,W]
    as an 8-bit PNG; exact inverse of load_image for 8-bit-representable
    values."""
    arr = np.asarray(tensor.data if isinstance(tensor, Tensor) else tensor, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 2:
        im = Image.fromarray(q, mode="L")
    elif q.ndim == 3 and q.shape[0] == 3:
        im = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    else:
        raise DataError(f"cannot encode array of shape {np.asarray(tensor.data if isinstance(tensor, Tensor) else tensor).shape} as an image")
    im.save(path, format="PNG")


def _save_ids(arr, path):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


def _load_ids(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.int64)
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot decode label/FOV raster {path}: {e}")


# ------------------------------------------------------------ manifests

def save_manifest(manifest: DatasetManifest, path):
    doc = {
        "split": manifest.split,
        "channels": manifest.channels,
        "samples": [
            {"image": e.image, "labels": e.labels, "fov": e.fov, "id": e.id}
            for e in manifest.entries
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}")
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}")
    for key in ("split", "channels", "samples"):
        if key not in doc:
            raise DataError(f"manifest {path} is missing key {key!r}")
    if doc["split"] not in ("train", "test"):
        raise DataError(f"manifest split must be train or test, got {doc['split']!r}")
    if doc["channels"] not in (1, 3):
        raise DataError(f"manifest channels must be 1 or 3, got {doc['channels']!r}")
    entries = []
    for rec in doc["samples"]:
        entries.append(ManifestEntry(image=rec["image"], labels=rec["labels"],
                                     fov=rec.get("fov"), id=rec.get("id", rec["image"])))
    return DatasetManifest(split=doc["split"], channels=doc["channels"],
                           entries=entries, base_dir=os.path.dirname(os.path.abspath(path)))


def load_sample(manifest: DatasetManifest, index: int) -> LabeledSample:
    e = manifest.entries[index]
    image = load_image(os.path.join(manifest.base_dir, e.image))
    if image.shape[1] != manifest.channels:
        raise DataError(f"sample {e.id}: image has {image.shape[1]} channels, "
                        f"manifest declares {manifest.channels}")
    labels = _load_ids(os.path.join(manifest.base_dir, e.labels))
    fov = None
    if e.fov is not None:
        fov = _load_ids(os.path.join(manifest.base_dir, e.fov)) > 0
    h, w = image.shape[2], image.shape[3]
    if labels.shape != (h, w) or (fov is not None and fov.shape != (h, w)):
        raise DataError(f"sample {e.id}: image/labels/fov shapes disagree")
    return LabeledSample(image=image, labels=labels, fov=fov, id=e.id)


def save_sample(sample: LabeledSample, out_dir, stem) -> ManifestEntry:
    """Write a sample's rasters into out_dir and return its manifest entry."""
    os.makedirs(out_dir, exist_ok=True)
    image_name = f"{stem}_image.png"
    labels_name = f"{stem}_labels.png"
    save_image(sample.image, os.path.join(out_dir, image_name))
    _save_ids(sample.labels, os.path.join(out_dir, labels_name))
    fov_name = None
    if sample.fov is not None:
        fov_name = f"{stem}_fov.png"
        _save_ids(sample.fov.astype(np.uint8), os.path.join(out_dir, fov_name))
    return ManifestEntry(image=image_name, labels=labels_name, fov=fov_name, id=sample.id)


# ------------------------------------------------------------ padding

def reflect_pad_sample(sample: LabeledSample, multiple: int):
    """Pad image/labels/fov on the bottom/right edges so both spatial
    extents are divisible by `multiple`.  Returns (padded sample,
    ignore_mask) where the mask is True exactly on the padded pixels."""
    h, w = sample.spatial_shape()
    ph = (-h) % multiple
    pw = (-w) % multiple
    ignore = np.zeros((h + ph, w + pw), dtype=bool)
    if ph == 0 and pw == 0:
        return sample, ignore
    ignore[h:, :] = True
    ignore[:, w:] = True
    mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
    image = np.pad(sample.image.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    labels = np.pad(sample.labels, ((0, ph), (0, pw)), mode=mode)
    fov = sample.fov
    if fov is not None:
        fov = np.pad(fov, ((0, ph), (0, pw)), mode="constant")
    return LabeledSample(image=Tensor(image), labels=labels, fov=fov, id=sample.id), ignore


# ------------------------------------------------- synthetic generators

def _spread_sites(rng, h, w, n):
    """n cell sites with a minimum pairwise spacing, greedily accepted from
    an oversampled candidate pool so the layout is a pure function of rng."""
    min_d2 = (0.35 * np.sqrt(h * w / n)) ** 2
    sites = []
    candidates = rng.uniform((0.0, 0.0), (h, w), size=(50 * n, 2))
    for cand in candidates:
        if all((cand[0] - s[0]) ** 2 + (cand[1] - s[1]) ** 2 >= min_d2 for s in sites):
            sites.append(cand)
            if len(sites) == n:
                break
    while len(sites) < n:  # pathological draw: fill without the spacing rule
        sites.append(rng.uniform((0.0, 0.0), (h, w)))
    return np.array(sites)


def synth_membranes(seed, h=64, w=64, n_cells=8) -> LabeledSample:
    """Voronoi cell mosaic: interiors are class 1, membrane pixels between
    adjacent cells are class 0.  4-connected components of the interior map
    recover the individual cells, which is what region-agreement scoring
    needs as ground truth."""
    if n_cells < 2:
        raise DataError(f"n_cells must be >= 2, got {n_cells}")
    rng = np.random.default_rng(seed)
    sites = _spread_sites(rng, h, w, n_cells)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = ((yy[:, :, None] + 0.5 - sites[:, 0]) ** 2
          + (xx[:, :, None] + 0.5 - sites[:, 1]) ** 2)
    cell = np.argmin(d2, axis=2)

    # a pixel is membrane when its right or down neighbor belongs elsewhere
    boundary = np.zeros((h, w), dtype=bool)
    boundary[:, :-1] |= cell[:, :-1] != cell[:, 1:]
    boundary[:-1, :] |= cell[:-1, :] != cell[1:, :]

    labels = np.where(boundary, 0, 1).astype(np.int64)
    img = 1.0 - 0.9 * boundary.astype(np.float64)
    img = img + rng.normal(0.0, 0.12, size=(h, w))
    img = gaussian_filter(img, sigma=0.8)
    img = np.clip(img, 0.0, 1.0)
    return LabeledSample(image=Tensor(img[None, None]), labels=labels, fov=None,
                         id=f"membranes-{seed}")


def _stamp_disk(canvas, cy, cx, radius):
    h, w = canvas.shape
    r = int(np.ceil(radius))
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _draw_vessel(canvas, rng, y, x, theta, length, width, depth):
    """Walk a tapering tube, spawning narrower side branches."""
    steps = max(int(length), 2)
    spawn_at = {int(steps * 0.45), int(steps * 0.75)} if depth < 2 else set()
    for s in range(steps):
        t = s / steps
        _stamp_disk(canvas, y, x, max(width * (1.0 - 0.6 * t), 0.6))
        theta += rng.normal(0.0, 0.12)
        y += np.sin(theta)
        x += np.cos(theta)
        if s in spawn_at:
            side = theta + rng.choice((-1.0, 1.0)) * rng.uniform(0.4, 0.9)
            _draw_vessel(canvas, rng, y, x, side,
                         length * rng.uniform(0.35, 0.55), width * 0.7, depth + 1)


def synth_vessels(seed, h=64, w=64, branches=5) -> LabeledSample:
    """Branching bright tubes on a textured background inside a circular
    field of view; class 1 marks vessel pixels, clipped to the FOV."""
    if branches < 1:
        raise DataError(f"branches must be >= 1, got {branches}")
    rng = np.random.default_rng(seed)
    cy, cx = h / 2.0, w / 2.0
    radius = 0.46 * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    fov = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2

    canvas = np.zeros((h, w), dtype=bool)
    for _ in range(branches):
        ang = rng.uniform(0.0, 2 * np.pi)
        start_r = rng.uniform(0.0, 0.5) * radius
        y0 = cy + start_r * np.sin(ang)
        x0 = cx + start_r * np.cos(ang)
        _draw_vessel(canvas, rng, y0, x0, rng.uniform(0.0, 2 * np.pi),
                     length=rng.uniform(0.5, 0.9) * min(h, w),
                     width=rng.uniform(1.2, 2.2), depth=0)
    foreground = canvas & fov

    background = 0.25 + 0.1 * gaussian_filter(rng.normal(size=(h, w)), sigma=3.0)
    img = background + 0.55 * gaussian_filter(foreground.astype(np.float64), sigma=0.7)
    img = np.clip(img * fov, 0.0, 1.0)
    labels = foreground.astype(np.int64)
    return LabeledSample(image=Tensor(img[None, None]), labels=labels, fov=fov,
                         id=f"vessels-{seed}")


# ----------------------------------------------------------- checkpoints

_MAGIC = b"ACENETCK"
_VERSION = 1


def save_checkpoint(net: Network, opt: AdamState, path, step=0):
    """Binary container: magic, version, JSON header (config echo, step,
    optimizer hyperparameters, entry table), then a raw little-endian
    payload.  Written to a temp file and atomically renamed."""
    dtype = next(iter(net.parameters.values())).data.dtype
    le = np.dtype(dtype).newbyteorder("<")
    entries = []
    blobs = []
    offset = 0

    def push(name, kind, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=le).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in net.parameters.items():
        push(name, "param", p.data)
    for name in net.parameters:
        if name in opt.m:
            push(name, "m", opt.m[name])
            push(name, "v", opt.v[name])

    header = {
        "format_version": _VERSION,
        "config": net.cfg.to_dict(),
        "step": int(step),
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                 "epsilon": opt.epsilon, "t": opt.t},
        "dtype": le.str,
        "entries": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path, expected_cfg: Optional[NetworkConfig] = None):
    """Rebuild (Network, AdamState, step) from a checkpoint file.

    Raises CheckpointVersionError on unknown versions,
    CheckpointConfigError when the stored config disagrees with
    `expected_cfg` or the parameter table does not match the rebuilt
    network, and CheckpointPayloadError on corrupt or truncated bytes.
    Nothing is partially mutated: all payload bytes are validated before
    any tensor is filled.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointPayloadError(f"cannot read checkpoint {path}: {e}")
    if len(raw) < len(_MAGIC) + 12 or raw[:len(_MAGIC)] != _MAGIC:
        raise CheckpointPayloadError(f"{path} is not a checkpoint file (bad magic)")
    pos = len(_MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != _VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}, this build reads {_VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if pos + header_len > len(raw):
        raise CheckpointPayloadError(f"checkpoint {path} header is truncated")
    try:
        header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointPayloadError(f"checkpoint {path} header is corrupt: {e}")
    payload = raw[pos + header_len:]

    cfg = NetworkConfig.from_dict(header["config"])
    if expected_cfg is not None and cfg != expected_cfg:
        raise CheckpointConfigError(
            f"checkpoint {path} was written for a different network config: "
            f"stored {cfg}, expected {expected_cfg}")

    dtype = np.dtype(header["dtype"])
    net = Network(cfg, seed=0)
    by_kind = {"param": {}, "m": {}, "v": {}}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointPayloadError(
                f"checkpoint {path} payload is truncated: entry {e['name']} "
                f"needs bytes up to {end}, file has {len(payload)}")
        arr = np.frombuffer(payload, dtype=dtype, count=e["nbytes"] // dtype.itemsize,
                            offset=e["offset"]).reshape(e["shape"])
        by_kind[e["kind"]][e["name"]] = arr

    stored = set(by_kind["param"])
    expected_names = set(net.parameters)
    if stored != expected_names:
        missing = sorted(expected_names - stored)[:3]
        extra = sorted(stored - expected_names)[:3]
        raise CheckpointConfigError(
            f"checkpoint {path} parameter table mismatch: missing {missing}, unexpected {extra}")
    for name, p in net.parameters.items():
        arr = by_kind["param"][name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointConfigError(
                f"checkpoint {path}: parameter {name} has shape {tuple(arr.shape)}, "
                f"network expects {p.shape}")
        p.data = arr.astype(dtype.newbyteorder("="), copy=True)

    adam = header["adam"]
    opt = AdamState(lr=adam["lr"], beta1=adam["beta1"], beta2=adam["beta2"],
                    epsilon=adam["epsilon"], t=adam["t"])
    native = dtype.newbyteorder("=")
    for name, arr in by_kind["m"].items():
        opt.m[name] = arr.astype(native, copy=True)
    for name, arr in by_kind["v"].items():
        opt.v[name] = arr.astype(native, copy=True)
    return net, opt, header["step"]
