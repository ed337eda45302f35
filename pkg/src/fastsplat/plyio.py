"""PLY import/export of Gaussian stores in the common splat vertex layout."""
from __future__ import annotations

import numpy as np

from .core import ParameterStore

_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4",
              "uint": "u4", "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1",
              "int16": "i2", "uint16": "u2", "int32": "i4", "uint32": "u4",
              "float32": "f4", "float64": "f8"}
_NAME_OF = {"f4": "float", "f8": "double"}


def _columns(store) -> dict[str, np.ndarray]:
    """Property name -> column, with f_rest laid out channel-major (c * 15 + k)."""
    from .gauss4d import Store4D

    n = len(store)
    cols = {}
    dims = "xyz"
    for i, d in enumerate(dims):
        cols[d] = store.means[:, i]
    if isinstance(store, Store4D):
        cols["t"] = store.means[:, 3]
    for c in range(3):
        cols[f"f_dc_{c}"] = store.sh_dc[:, c]
    rest = np.transpose(store.sh_rest, (0, 2, 1)).reshape(n, 45)
    for i in range(45):
        cols[f"f_rest_{i}"] = rest[:, i]
    cols["opacity"] = store.opacity_logits[:, 0]
    for i in range(3):
        cols[f"scale_{i}"] = store.log_scales[:, i]
    if isinstance(store, Store4D):
        cols["scale_t"] = store.log_scales[:, 3]
        for i in range(4):
            cols[f"rot_l_{i}"] = store.quat_left[:, i]
        for i in range(4):
            cols[f"rot_r_{i}"] = store.quat_right[:, i]
    else:
        for i in range(4):
            cols[f"rot_{i}"] = store.quaternions[:, i]
    return cols


def write_ply(path, store, binary: bool = True) -> None:
    cols = _columns(store)
    code = "f8" if store.dtype == np.float64 else "f4"
    ptype = _NAME_OF[code]
    n = len(store)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property {ptype} {name}" for name in cols]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[(k, "<" + code) for k in cols])
            for k, v in cols.items():
                rec[k] = v
            f.write(rec.tobytes())
        else:
            table = np.stack([v.astype(np.float64) for v in cols.values()], axis=1) if n else np.zeros((0, len(cols)))
            for row in table:
                f.write((" ".join(repr(float(x)) for x in row) + "\n").encode("ascii"))


def read_ply_columns(path) -> dict[str, np.ndarray]:
    """Vertex properties of an ascii or binary little-endian PLY as named columns."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        props: list[tuple[str, str]] = []
        count = 0
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    count = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise ValueError(f"{path}: list properties are not supported on vertices")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, "<" + code) for name, code in props])
            data = np.frombuffer(f.read(dtype.itemsize * count), dtype=dtype, count=count)
            return {name: data[name].astype(np.float64) for name, _ in props}
        if fmt == "ascii":
            rows = [f.readline().split() for _ in range(count)]
            table = np.array(rows, dtype=np.float64).reshape(count, len(props))
            return {name: table[:, i] for i, (name, _) in enumerate(props)}
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")


def read_ply(path, dtype=np.float32):
    """Load a :class:`ParameterStore`, or a 4D store if time properties are present."""
    cols = read_ply_columns(path)
    n = len(cols["x"])

    def stack(names):
        return np.stack([cols[k] for k in names], axis=1).astype(dtype) if n else np.zeros((0, len(names)), dtype)

    try:
        dc = stack([f"f_dc_{c}" for c in range(3)])
        rest_names = [f"f_rest_{i}" for i in range(45)]
        if all(k in cols for k in rest_names):
            rest = stack(rest_names).reshape(n, 3, 15).transpose(0, 2, 1).copy()
        else:
            rest = np.zeros((n, 15, 3), dtype)
        opacity = stack(["opacity"])
        if "t" in cols:
            from .gauss4d import Store4D

            return Store4D(stack(["x", "y", "z", "t"]),
                           stack(["scale_0", "scale_1", "scale_2", "scale_t"]),
                           stack([f"rot_l_{i}" for i in range(4)]),
                           stack([f"rot_r_{i}" for i in range(4)]), opacity, dc, rest)
        return ParameterStore(stack(["x", "y", "z"]), stack([f"scale_{i}" for i in range(3)]),
                              stack([f"rot_{i}" for i in range(4)]), opacity, dc, rest)
    except KeyError as e:
        raise ValueError(f"{path}: missing vertex property {e.args[0]}") from None
