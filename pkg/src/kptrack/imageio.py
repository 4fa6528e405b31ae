"""Image and keypoint file I/O: PPM/PGM (P5/P6) read+write, PNG read+write."""

from pathlib import Path

import numpy as np


def _read_pnm(path):
    blob = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM type {magic!r} (need P5 or P6)")
    chans = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    count = w * h * chans
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    img = data.reshape(h, w, chans).astype(np.float64) / maxval
    return img[..., 0] if chans == 1 else img


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3].mean(axis=2)
    return img


def read_image(path, gray=True):
    """Read PNG/PPM/PGM into floats in [0, 1]; color is averaged to gray."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        img = _read_pnm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im)
        if arr.dtype == np.uint16:
            img = arr.astype(np.float64) / 65535.0
        elif arr.dtype == bool:
            img = arr.astype(np.float64)
        else:
            img = arr.astype(np.float64) / 255.0
    return to_gray(img) if gray else img


def _to_u8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    """Write a gray (P5) or RGB (P6) 8-bit image; input floats in [0, 1]."""
    arr = _to_u8(img)
    if arr.ndim == 2:
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    else:
        raise ValueError(f"cannot write image of shape {arr.shape} as PPM")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(arr).tobytes())


def write_image(path, img):
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        write_ppm(path, img)
        return
    from PIL import Image

    Image.fromarray(_to_u8(img)).save(path)


def read_keypoints(path):
    """One 'x y' pair per line; blank lines and '#' comments are skipped."""
    pts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        pts.append((float(parts[0]), float(parts[1])))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def write_keypoints(path, pts):
    with open(path, "w") as f:
        for x, y in np.asarray(pts, dtype=np.float64).reshape(-1, 2):
            f.write(f"{float(x)!r} {float(y)!r}\n")
