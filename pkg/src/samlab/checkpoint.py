"""SAMLAB-CKPT v1: plain-text, lossless model checkpoints.

Layout: one header line carrying dims and options, then one block per
tensor in the fixed order w_q, w_k, w_v, w_o, w, revin_beta, revin_gamma,
sigma_gammas (the last only when sigma-reparam is on). A block is a line
``tensor <name> <rows> <cols>`` followed by rows*cols decimal reals, one per
line, printed with 17 significant digits so doubles round-trip exactly.
Parse errors carry the byte offset of the offending line.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .model import (
    AttentionVariant,
    ModelDims,
    ModelOptions,
    ModelParams,
    WEIGHT_NAMES,
    weight_shapes,
)

MAGIC = "SAMLAB-CKPT v1"


def _tensor_order(options: ModelOptions) -> list[str]:
    order = list(WEIGHT_NAMES) + ["revin_beta", "revin_gamma"]
    if options.sigma_reparam:
        order.append("sigma_gammas")
    return order


def write_checkpoint(path: str, params: ModelParams, dims: ModelDims,
                     options: ModelOptions) -> None:
    tensors = {name: np.atleast_2d(getattr(params, name)) for name in _tensor_order(options)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{MAGIC} L={dims.lookback} H={dims.horizon} D={dims.channels} "
                 f"d_m={dims.d_model} revin={int(options.revin)} "
                 f"sigma_reparam={int(options.sigma_reparam)} "
                 f"variant={options.variant.value} revin_eps={options.revin_eps:.17g}\n")
        for name in _tensor_order(options):
            t = tensors[name]
            fh.write(f"tensor {name} {t.shape[0]} {t.shape[1]}\n")
            fh.write("".join(f"{v:.17g}\n" for v in t.ravel()))


class _Cursor:
    """Line reader that tracks the byte offset of the line it just returned."""

    def __init__(self, text: str):
        self._lines = text.split("\n")
        self._idx = 0
        self.offset = 0
        self._next_offset = 0

    def next_line(self) -> str:
        if self._idx >= len(self._lines):
            raise FormatError(f"unexpected end of checkpoint at byte {self._next_offset}")
        line = self._lines[self._idx]
        self.offset = self._next_offset
        self._next_offset += len(line.encode("utf-8")) + 1
        self._idx += 1
        return line

    def at_end(self) -> bool:
        # trailing newline leaves one empty chunk behind
        return self._idx >= len(self._lines) or (
            self._idx == len(self._lines) - 1 and self._lines[-1] == "")


def read_checkpoint(path: str) -> tuple[ModelParams, ModelDims, ModelOptions]:
    with open(path, "r", encoding="utf-8") as fh:
        cur = _Cursor(fh.read())
    header = cur.next_line()
    if not header.startswith(MAGIC + " "):
        raise FormatError(f"bad checkpoint magic at byte 0: {header[:40]!r}")
    fields = {}
    for token in header[len(MAGIC) + 1:].split():
        if "=" not in token:
            raise FormatError(f"bad header token {token!r} at byte 0")
        key, val = token.split("=", 1)
        fields[key] = val
    try:
        dims = ModelDims(lookback=int(fields["L"]), horizon=int(fields["H"]),
                         channels=int(fields["D"]), d_model=int(fields["d_m"]))
        options = ModelOptions(revin=bool(int(fields["revin"])),
                               sigma_reparam=bool(int(fields["sigma_reparam"])),
                               variant=AttentionVariant(fields["variant"]),
                               revin_eps=float(fields["revin_eps"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad checkpoint header at byte 0: {exc}") from exc

    shapes = dict(weight_shapes(dims, options.variant))
    shapes["revin_beta"] = (1, dims.channels)
    shapes["revin_gamma"] = (1, dims.channels)
    shapes["sigma_gammas"] = (1, len(WEIGHT_NAMES))

    tensors = {}
    for name in _tensor_order(options):
        line = cur.next_line()
        parts = line.split()
        if len(parts) != 4 or parts[0] != "tensor":
            raise FormatError(f"expected tensor block header at byte {cur.offset}, got {line!r}")
        if parts[1] != name:
            raise FormatError(f"expected tensor {name!r} at byte {cur.offset}, got {parts[1]!r}")
        try:
            rows, cols = int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise FormatError(f"bad tensor dims at byte {cur.offset}: {line!r}") from exc
        if (rows, cols) != shapes[name]:
            raise FormatError(f"tensor {name} has shape {(rows, cols)} at byte "
                              f"{cur.offset}, expected {shapes[name]}")
        flat = np.empty(rows * cols)
        for i in range(rows * cols):
            value_line = cur.next_line()
            try:
                flat[i] = float(value_line)
            except ValueError as exc:
                raise FormatError(
                    f"bad real at byte {cur.offset}: {value_line!r}") from exc
        tensors[name] = flat.reshape(rows, cols)
    if not cur.at_end():
        raise FormatError(f"trailing content at byte {cur._next_offset}")

    params = ModelParams(
        w_q=tensors["w_q"], w_k=tensors["w_k"], w_v=tensors["w_v"],
        w_o=tensors["w_o"], w=tensors["w"],
        revin_beta=tensors["revin_beta"].ravel(),
        revin_gamma=tensors["revin_gamma"].ravel(),
        sigma_gammas=tensors["sigma_gammas"].ravel() if options.sigma_reparam else None)
    return params, dims, options
