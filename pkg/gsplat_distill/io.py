import csv
import pathlib
from dataclasses import dataclass

import funcy
import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from .logging import logger
from .scene import STORAGE_DTYPE, Camera, GaussianCloud

FORMAT_VERSION = "gsplat-distill-v1"
STORAGE = np.dtype(STORAGE_DTYPE).newbyteorder("<")

# PLY property name -> (cloud attribute, column)
PLY_PROPERTIES = {
    "x": ("positions", 0),
    "y": ("positions", 1),
    "z": ("positions", 2),
    "log_scale_0": ("log_scales", 0),
    "log_scale_1": ("log_scales", 1),
    "log_scale_2": ("log_scales", 2),
    "rot_0": ("rotations", 0),
    "rot_1": ("rotations", 1),
    "rot_2": ("rotations", 2),
    "rot_3": ("rotations", 3),
    "opacity_logit": ("opacity_logits", None),
    "r": ("colors", 0),
    "g": ("colors", 1),
    "b": ("colors", 2),
}


class CloudFormatError(ValueError):
    """The file is not a readable binary PLY"""


class CloudSchemaError(ValueError):
    """The PLY is readable but lacks what a cloud needs"""


class ImageFormatError(ValueError): ...


# ------------------------ clouds ------------------------


def _column(cloud: GaussianCloud, attribute: str, column: int | None) -> np.ndarray:
    values = getattr(cloud, attribute)
    return values if column is None else values[:, column]


def save_cloud(cloud: GaussianCloud, path):
    """Write a cloud as binary little-endian PLY.

    Values are stored as float32, lossless for clouds kept at that precision
    (see `GaussianCloud.round_to_storage`); the step counter goes in a header
    comment. Gradient accumulators are not persisted.
    """
    vertices = np.empty(len(cloud), dtype=[(name, STORAGE) for name in PLY_PROPERTIES])
    for name, (attribute, column) in PLY_PROPERTIES.items():
        vertices[name] = _column(cloud, attribute, column)
    element = PlyElement.describe(vertices, "vertex")
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData(
        [element],
        text=False,
        byte_order="<",
        comments=[FORMAT_VERSION, f"step {cloud.step}"],
    ).write(str(path))
    logger.debug(f"saved {len(cloud)} gaussians to {path}")


def _read_step(comments: list[str]) -> int:
    for comment in comments:
        match comment.split():
            case ["step", value]:
                return int(value)
    return 0


def load_cloud(path) -> GaussianCloud:
    try:
        with open(path, "rb") as stream:
            ply = PlyData.read(stream, mmap=False)
    except PlyParseError as error:
        element = getattr(error, "element", None)
        where = f"element '{element.name}'" if element is not None else "header"
        raise CloudFormatError(f"{path}: malformed {where}: {error}") from error
    except (ValueError, EOFError) as error:
        raise CloudFormatError(f"{path}: malformed element 'vertex': {error}") from error
    if FORMAT_VERSION not in ply.comments:
        logger.warning(f"{path}: no '{FORMAT_VERSION}' header comment")
    try:
        vertex = ply["vertex"]
    except KeyError:
        raise CloudSchemaError(f"{path}: no 'vertex' element")
    present = {prop.name for prop in vertex.properties}
    if missing := [name for name in PLY_PROPERTIES if name not in present]:
        raise CloudSchemaError(f"{path}: missing vertex properties {missing}")
    count = vertex.count
    arrays = {
        "positions": np.zeros((count, 3)),
        "log_scales": np.zeros((count, 3)),
        "rotations": np.zeros((count, 4)),
        "opacity_logits": np.zeros(count),
        "colors": np.zeros((count, 3)),
    }
    for name, (attribute, column) in PLY_PROPERTIES.items():
        values = np.asarray(vertex[name], dtype=np.float64)
        if column is None:
            arrays[attribute][:] = values
        else:
            arrays[attribute][:, column] = values
    logger.debug(f"loaded {count} gaussians from {path}")
    return GaussianCloud(**arrays, step=_read_step(ply.comments))


# ------------------------ images ------------------------


def encode_srgb(image: np.ndarray) -> np.ndarray:
    """Linear [0,1] floats to 8-bit, 2.2 power law, round half away from zero"""
    encoded = np.power(np.clip(image, 0.0, 1.0), 1.0 / 2.2) * 255.0
    return np.floor(encoded + 0.5).astype(np.uint8)


def decode_srgb(data: np.ndarray) -> np.ndarray:
    return np.power(data.astype(np.float64) / 255.0, 2.2)


def write_ppm(image: np.ndarray, path):
    """Write an (H, W, 3) linear image as binary P6"""
    height, width, _ = image.shape
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    path.write_bytes(header + encode_srgb(image).tobytes())


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens, skipping # comments"""
    tokens, position = [], 0
    while len(tokens) < count:
        while position < len(data) and data[position : position + 1].isspace():
            position += 1
        if data[position : position + 1] == b"#":
            position = data.index(b"\n", position) + 1
            continue
        start = position
        while position < len(data) and not data[position : position + 1].isspace():
            position += 1
        if start == position:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:position])
    # exactly one whitespace byte separates the header from the raster
    return tokens, position + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file as a linear (H, W, 3) float image"""
    data = pathlib.Path(path).read_bytes()
    try:
        tokens, offset = _header_tokens(data, 4)
        magic, width, height, maxval = tokens[0], *map(int, tokens[1:])
    except ValueError as error:
        raise ImageFormatError(f"{path}: bad PPM header: {error}") from error
    if magic != b"P6" or maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit P6 images are supported")
    raster = np.frombuffer(data, dtype=np.uint8, offset=offset)
    if raster.size != width * height * 3:
        raise ImageFormatError(
            f"{path}: expected {width * height * 3} bytes of pixels, found {raster.size}"
        )
    return decode_srgb(raster.reshape(height, width, 3))


# ------------------------ target manifests ------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image: pathlib.Path
    azimuth: float
    elevation: float
    radius: float
    fov_y: float


def read_manifest(path) -> list[ManifestEntry]:
    """One view per line: image path, azimuth, elevation, radius, fov_y.

    Image paths are relative to the manifest directory; '#' starts a comment.
    """
    path = pathlib.Path(path)
    entries = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        fields = content.split()
        if len(fields) != 5:
            raise ValueError(f"{path}:{number}: expected 5 fields, found {len(fields)}")
        try:
            azimuth, elevation, radius, fov_y = map(float, fields[1:])
        except ValueError as error:
            raise ValueError(f"{path}:{number}: {error}") from error
        entries.append(
            ManifestEntry(path.parent / fields[0], azimuth, elevation, radius, fov_y)
        )
    return entries


def write_manifest(entries: list[ManifestEntry], path):
    path = pathlib.Path(path)
    lines = ["# image azimuth elevation radius fov_y"]
    for entry in entries:
        image = pathlib.Path(entry.image)
        name = image.relative_to(path.parent) if image.is_absolute() else image
        lines.append(
            f"{name} {entry.azimuth!r} {entry.elevation!r} {entry.radius!r} {entry.fov_y!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def load_views(path, width: int, height: int) -> list[tuple[Camera, np.ndarray]]:
    views = []
    for entry in read_manifest(path):
        image = read_ppm(entry.image)
        if image.shape != (height, width, 3):
            raise ValueError(
                f"{entry.image}: image is {image.shape[1]}x{image.shape[0]}, "
                f"expected {width}x{height}"
            )
        camera = Camera(
            azimuth=entry.azimuth,
            elevation=entry.elevation,
            radius=entry.radius,
            fov_y=entry.fov_y,
            width=width,
            height=height,
        )
        views.append((camera, image))
    return views


# ------------------------ csv ------------------------


def _format(value) -> str:
    match value:
        case None:
            return ""
        case bool():
            return str(int(value))
        case float() | np.floating():
            return repr(float(value))
        case _:
            return str(value)


def write_csv(rows: list[dict], path, schema: str, columns: list[str] | None = None):
    """CSV with a leading '# schema' line and a fixed column order"""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as file:
        file.write(f"# {schema}\n")
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(funcy.lmap(lambda column: _format(row.get(column)), columns))


def read_csv(path) -> list[dict[str, str]]:
    lines = pathlib.Path(path).read_text().splitlines()
    return list(csv.DictReader(funcy.remove(lambda line: line.startswith("#"), lines)))
