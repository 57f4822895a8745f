"""Every file format the package reads or writes.

PNG for images and masks, OBJ for meshes, binary PLY for splats, JSON for
manifests, configs and reports, a small binary container for checkpoints
and CSV for training logs. All writers are deterministic.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .articulated import AGENTS, N_POSE, N_SHAPE, SkinnedTemplate, make_toy_hand, rigid_template
from .errors import DimensionMismatch, MissingFile, ParseError, StateMismatch
from .gaussians import GaussianSet
from .geometry import Camera
from .optim import Adam, OptimConfig
from .scene import AgentParams, FrameObservation, Scene

SCENE_FORMAT = "handsplat-scene"
SCENE_VERSION = 1
CHECKPOINT_MAGIC = b"HSPLCKPT"
CHECKPOINT_VERSION = 1
PLY_PROPERTIES = (
    "x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z",
    "log_scale_x", "log_scale_y", "log_scale_z", "opacity_logit", "red", "green", "blue",
)


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing file: {path}")
    return path


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    path = _require(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


# ----------------------------------------------------------------------------
# images


def write_png(path, array) -> None:
    """Write a float image in [0, 1] (H x W x 3 or H x W) as 8-bit PNG."""
    a = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path, format="PNG", optimize=False)


def quantize(array) -> np.ndarray:
    """The values :func:`read_png` returns after a :func:`write_png` round trip."""
    return np.round(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def read_png(path) -> np.ndarray:
    path = _require(path)
    try:
        with Image.open(path) as im:
            data = np.asarray(im)
    except OSError as exc:
        raise ParseError(f"{path}: not a readable image ({exc})") from exc
    if data.dtype != np.uint8:
        data = (data / np.iinfo(data.dtype).max * 255.0) if data.dtype.kind in "ui" else data * 255.0
    return np.asarray(data, dtype=np.float64) / 255.0


def read_rgb(path) -> np.ndarray:
    img = read_png(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3]


def read_mask(path) -> np.ndarray:
    img = read_png(path)
    if img.ndim == 3:
        img = img[..., :3].mean(axis=2)
    return (img >= 0.5).astype(np.float64)


# ----------------------------------------------------------------------------
# meshes


def write_obj(path, vertices, faces) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64).tolist()]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangle faces; polygons are fan-triangulated."""
    path = _require(path)
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs three coordinates")
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError(f"{path}: face index out of range")
    return v, f


# ----------------------------------------------------------------------------
# splats


def write_ply(path, gaussians: GaussianSet) -> None:
    """Binary little-endian PLY with float32 properties."""
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(gaussians)}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    body = gaussians.as_array().astype("<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(body)


def read_ply(path) -> GaussianSet:
    path = _require(path)
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    n = None
    props = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"] or parts[:1] in (["ply"], ["comment"]):
            continue
        if parts[:1] == ["format"]:
            raise ParseError(f"{path}:{lineno}: only binary_little_endian is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise ParseError(f"{path}:{lineno}: property {parts[-1]} must be float")
            props.append(parts[2])
    if n is None or tuple(props) != PLY_PROPERTIES:
        raise ParseError(f"{path}: expected vertex element with properties {PLY_PROPERTIES}")
    body = data[end + len(b"end_header\n"):]
    if len(body) != n * 4 * len(PLY_PROPERTIES):
        raise ParseError(f"{path}: body holds {len(body)} bytes, expected {n * 4 * len(PLY_PROPERTIES)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(n, len(PLY_PROPERTIES)).astype(np.float64)
    return GaussianSet.from_array(arr)


# ----------------------------------------------------------------------------
# named-array container


_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8"), b"u": np.dtype("u1")}


def write_arrays(path, arrays: dict) -> None:
    """Named arrays in a fixed binary layout, in the given key order."""
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = {"f": b"f", "i": b"i", "u": b"u", "b": b"u"}.get(arr.dtype.kind)
        if code is None:
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr.astype(_DTYPES[code]))
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key + code + struct.pack("<B", data.ndim))
        out.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        out.append(data.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(out))
    os.replace(tmp, path)


def read_arrays(path) -> dict:
    path = _require(path)
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", data, pos)
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        pos += 8
        out = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + klen].decode("utf-8")
            pos += klen
            code = data[pos:pos + 1]
            (ndim,) = struct.unpack_from("<B", data, pos + 1)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(data):
                raise ParseError(f"{path}: truncated array {name!r}")
            out[name] = np.frombuffer(data[pos:pos + size], dtype=dtype).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise ParseError(f"{path}: trailing bytes")
    return out


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _meta_from(arr) -> dict:
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state) -> None:
    """Write a TrainState (every agent's parameters, base splats and Adam moments)."""
    meta = {
        "stage": state.stage,
        "iteration": int(state.iteration),
        "agents": list(state.agents),
        "config": state.config.to_dict(),
    }
    arrays = {"__meta__": _meta_array(meta)}
    for a, ast in state.agents.items():
        arrays[f"{a}/base"] = ast.base.as_array()
        arrays[f"{a}/box"] = np.stack([ast.box_min, ast.box_max])
        for k, v in ast.params.items():
            arrays[f"{a}/param/{k}"] = v
        if ast.optimizer is not None:
            for k, v in ast.optimizer.state().items():
                arrays[f"{a}/adam/{k}"] = v
    write_arrays(path, arrays)


def load_checkpoint(path, scene: Scene):
    """Inverse of :func:`save_checkpoint`; templates come from ``scene``."""
    from .training import AgentState, TrainState

    arrays = read_arrays(path)
    if "__meta__" not in arrays:
        raise ParseError(f"{path}: checkpoint has no metadata")
    meta = _meta_from(arrays["__meta__"])
    config = OptimConfig.from_dict(meta["config"])
    agents = {}
    for a in meta["agents"]:
        template = scene.template(a)
        base = GaussianSet.from_array(arrays[f"{a}/base"])
        if len(base) != template.n_vertices:
            raise StateMismatch(f"{path}: agent {a!r} has {len(base)} splats, template has {template.n_vertices} vertices")
        prefix = f"{a}/param/"
        params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        box = arrays[f"{a}/box"]
        ast = AgentState(a, template, base, box[0].copy(), box[1].copy(), params)
        adam_prefix = f"{a}/adam/"
        adam = {k[len(adam_prefix):]: v for k, v in arrays.items() if k.startswith(adam_prefix)}
        if adam:
            opt = Adam(ast.params, config.beta1, config.beta2, config.eps)
            opt.load_state(adam)
            ast.optimizer = opt
        agents[a] = ast
    return TrainState(agents, meta["stage"], int(meta["iteration"]), config)


def export_network(path, state) -> None:
    """Float32 copy of one agent's triplane and MLP weights."""
    write_arrays(path, {k: np.asarray(v, dtype=np.float32).astype(np.float64)
                        for k, v in state.params.items() if k not in ("phi", "gamma", "theta", "beta")})


# ----------------------------------------------------------------------------
# configs and logs


def load_config(path, base: OptimConfig | None = None) -> OptimConfig:
    data = read_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    try:
        return OptimConfig.from_dict(data, base)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


class CsvLog:
    """Append-only CSV training log with a fixed column set."""

    COLUMNS = ("stage", "agent", "iteration", "frames", "ssim", "perceptual", "lbs", "mask_fg",
               "mask_bg", "color", "scale", "contact", "total")

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._writer.writerow(self.COLUMNS)

    def __call__(self, row: dict) -> None:
        values = []
        for col in self.COLUMNS:
            v = row.get(col, "")
            if col == "frames":
                v = " ".join(str(t) for t in v)
            elif isinstance(v, float):
                v = repr(v)
            values.append(v)
        self._writer.writerow(values)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ----------------------------------------------------------------------------
# scenes


def _params_to_json(params: AgentParams, t: int) -> dict:
    return {k: [float(x) for x in getattr(params, k)[t]] for k in ("phi", "gamma", "theta", "beta")}


def params_to_json(params: dict) -> dict:
    """Per-agent (T, k) arrays as nested lists."""
    return {a: {k: getattr(p, k).tolist() for k in ("phi", "gamma", "theta", "beta")} for a, p in params.items()}


def params_from_json(data: dict, where: str) -> dict:
    out = {}
    for a in AGENTS:
        if a not in data:
            raise ParseError(f"{where}: missing agent {a!r}")
        d = data[a]
        try:
            out[a] = AgentParams(*(np.asarray(d[k], dtype=np.float64) for k in ("phi", "gamma", "theta", "beta")))
        except KeyError as exc:
            raise ParseError(f"{where}: agent {a!r} lacks field {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise ParseError(f"{where}: agent {a!r}: {exc}") from exc
    return out


def template_entry(agent: str, relpath: str) -> dict:
    entry = {"obj": relpath}
    if agent in ("l", "r"):
        entry.update({"rig": "toy", "handedness": agent})
    return entry


def write_scene(path, scene: Scene, template_paths: dict | None = None) -> None:
    """Write manifest, frames and templates under directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    template_paths = template_paths or {"l": "templates/hand_l.obj", "r": "templates/hand_r.obj", "o": "templates/object.obj"}
    templates = {}
    for a in AGENTS:
        t = scene.template(a)
        write_obj(root / template_paths[a], t.vertices, t.faces)
        templates[a] = template_entry(a, template_paths[a])
    frames = []
    for t, f in enumerate(scene.frames):
        image = f"frames/{t:03d}_rgb.png"
        write_png(root / image, f.image)
        masks = {}
        for a in AGENTS:
            masks[a] = f"frames/{t:03d}_mask_{a}.png"
            write_png(root / masks[a], f.masks[a])
        frames.append({"image": image, "masks": masks,
                       "params": {a: _params_to_json(scene.init_params[a], t) for a in AGENTS}})
    manifest = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "units": "cm",
        "camera": scene.camera.to_dict(),
        "templates": templates,
        "frames": frames,
        **({"meta": scene.meta} if scene.meta else {}),
    }
    write_json(root / "scene.json", manifest)


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing field {where}.{key}" if where else f"missing field {key}")
    return obj[key]


def _load_template(root: Path, agent: str, entry: dict, where: str) -> SkinnedTemplate:
    rel = _field(entry, "obj", where)
    vertices, faces = read_obj(root / rel)
    rig = entry.get("rig")
    if rig is None:
        return rigid_template(vertices, faces)
    if rig != "toy":
        raise ParseError(f"{where}.rig: unknown rig {rig!r}")
    hand = make_toy_hand(entry.get("handedness", agent))
    if vertices.shape != hand.vertices.shape or not np.array_equal(faces, hand.faces):
        raise ParseError(f"{root / rel}: mesh topology does not match the {rig!r} rig")
    return replace(hand, vertices=vertices)


def load_scene(path) -> Scene:
    """Load and validate a scene directory (or its scene.json)."""
    path = Path(path)
    manifest_path = path / "scene.json" if path.is_dir() else path
    root = manifest_path.parent
    data = read_json(manifest_path)
    where = str(manifest_path)
    try:
        if data.get("format") != SCENE_FORMAT:
            raise ParseError(f"{where}: field format must be {SCENE_FORMAT!r}")
        if data.get("units", "cm") != "cm":
            raise ParseError(f"{where}: field units must be 'cm'")
        camera = Camera.from_dict(_field(data, "camera", ""))
        templates = {a: _load_template(root, a, _field(_field(data, "templates", ""), a, "templates"), f"templates.{a}")
                     for a in AGENTS}
        entries = _field(data, "frames", "")
        if not isinstance(entries, list) or not entries:
            raise ParseError(f"{where}: frames must be a non-empty list")
        frames = []
        per_agent = {a: {k: [] for k in ("phi", "gamma", "theta", "beta")} for a in AGENTS}
        for t, entry in enumerate(entries):
            fw = f"frames[{t}]"
            image = read_rgb(root / _field(entry, "image", fw))
            masks = {a: read_mask(root / _field(_field(entry, "masks", fw), a, f"{fw}.masks")) for a in AGENTS}
            for a, m in masks.items():
                if m.shape != image.shape[:2]:
                    raise DimensionMismatch(f"frame {t}: mask {a!r} is {m.shape[1]}x{m.shape[0]}, "
                                            f"image is {image.shape[1]}x{image.shape[0]}")
            frames.append(FrameObservation(image, masks, camera, t))
            params = _field(entry, "params", fw)
            for a in AGENTS:
                pa = _field(params, a, f"{fw}.params")
                for k in per_agent[a]:
                    per_agent[a][k].append([float(x) for x in _field(pa, k, f"{fw}.params.{a}")])
        init = {}
        for a in AGENTS:
            p = {k: np.asarray(v, dtype=np.float64) for k, v in per_agent[a].items()}
            theta, beta = p["theta"], p["beta"]
            if theta.ndim != 2 or beta.ndim != 2:
                raise ParseError(f"{where}: agent {a!r} pose/shape lengths differ between frames")
            expect = (N_POSE, N_SHAPE) if templates[a].is_articulated else (0, 0)
            if (theta.shape[1], beta.shape[1]) != expect:
                raise ParseError(f"{where}: agent {a!r} needs pose/shape of size {expect}")
            init[a] = AgentParams(p["phi"], p["gamma"], theta, beta)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, (ParseError, DimensionMismatch)):
            raise
        raise ParseError(f"{where}: {exc}") from exc
    return Scene(camera, frames, templates, init, str(root), data.get("meta", {}))
