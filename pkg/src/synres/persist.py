"""Persistence: checkpoint/dataset container, metrics CSV sink, config files.

The container is a textual header (key-value lines plus a tensor manifest)
terminated by a blank line, followed by concatenated little-endian raw
element data in manifest order. Save -> load -> save is byte-identical, and
loaded parameters reproduce forward outputs bitwise at equal precision.
"""

from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import Batch, TaskSpec, VocabLayout
from .model import GateMode, LayerParams, ModelConfig, Params
from .train import TrainConfig

FORMAT_VERSION = 1

_DTYPE_CODES = {"f4": np.float32, "f8": np.float64, "i8": np.int64, "b1": np.bool_}
_CODE_OF = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    """Container parse/consistency failure; message names the failing entry."""


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, GateMode):
        return value.value
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value) if value else "none"
    return str(value)


def _parse(text: str, kind: str):
    if text == "none":
        return None
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return text == "true"
    if kind == "int_list":
        return tuple(int(v) for v in text.split(","))
    return text  # str


_MODEL_FIELDS = {
    "vocab_size": "int", "d_model": "int", "n_heads": "int", "n_layers": "int",
    "d_ff": "int", "max_seq_len": "int", "sigma_init": "float", "gate_mode": "str",
}
_TRAIN_FIELDS = {
    "epochs": "int", "batch_size": "int", "lr": "float", "lr_decay": "float",
    "ppl_threshold": "float", "reg_weight": "float", "grad_clip": "float",
    "seed": "int", "min_lr": "float",
}
_TASK_FIELDS = {
    "kind": "str", "seq_len": "int", "pairs": "int", "distances": "int_list",
    "samples": "int", "seed": "int", "val_fraction": "float", "corpus_path": "str",
}
_LAYOUT_FIELDS = {
    "vocab_size": "int", "pad": "int", "bos": "int", "sep": "int", "query": "int",
    "filler": "int", "key_lo": "int", "key_hi": "int", "value_lo": "int",
    "value_hi": "int", "byte_mode": "bool",
}


def _header_lines_for_config(prefix: str, obj, fields: dict) -> list[str]:
    return [f"{prefix}.{name} {_fmt(getattr(obj, name))}" for name in fields]


def _collect_section(pairs: dict[str, str], prefix: str, fields: dict) -> dict:
    out = {}
    for name, kind in fields.items():
        key = f"{prefix}.{name}"
        if key not in pairs:
            raise CheckpointError(f"missing header entry {key}")
        value = _parse(pairs[key], kind)
        if name == "distances" and value is None:
            value = ()
        out[name] = value
    return out


def _write_container(path, header_lines: list[str], arrays: list[tuple[str, np.ndarray]]):
    manifest, offset = [], 0
    for name, arr in arrays:
        code = _CODE_OF[arr.dtype]
        manifest.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]} {code} {offset}")
        offset += arr.nbytes
    blob = io.BytesIO()
    blob.write(("\n".join(header_lines + manifest) + "\n\n").encode())
    for _, arr in arrays:
        blob.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(blob.getvalue())


def _read_container(path):
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: no blank line terminating the header")
    header, payload = raw[:sep].decode(), raw[sep + 2 :]
    pairs: dict[str, str] = {}
    manifest: list[tuple[str, int, int, str, int]] = []
    for line in header.splitlines():
        key, _, rest = line.partition(" ")
        if key == "tensor":
            try:
                name, rows, cols, code, offset = rest.split(" ")
                manifest.append((name, int(rows), int(cols), code, int(offset)))
            except ValueError as err:
                raise CheckpointError(f"malformed manifest line: {line!r}") from err
        else:
            pairs[key] = rest
    if pairs.get("format") != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported container format {pairs.get('format')!r}")
    arrays: dict[str, np.ndarray] = {}
    for name, rows, cols, code, offset in manifest:
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code!r}")
        dtype = np.dtype(_DTYPE_CODES[code])
        nbytes = rows * cols * dtype.itemsize
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"tensor {name}: payload truncated at offset {offset}")
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(rows, cols).copy()
    return pairs, arrays


@dataclass
class Checkpoint:
    params: Params
    model_config: ModelConfig
    train_config: TrainConfig
    seed: int
    epoch: int


def save_checkpoint(path, params: Params, train_config: TrainConfig, seed: int, epoch: int):
    header = [f"format {FORMAT_VERSION}", "kind checkpoint"]
    header += _header_lines_for_config("model", params.config, _MODEL_FIELDS)
    header += _header_lines_for_config("train", train_config, _TRAIN_FIELDS)
    header += [f"seed {seed}", f"epoch {epoch}"]
    tensors = [(name, np.ascontiguousarray(t.data)) for name, t in params.named_tensors()]
    _write_container(path, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    pairs, arrays = _read_container(path)
    if pairs.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container kind {pairs.get('kind')!r} is not a checkpoint")
    model_config = ModelConfig(**_collect_section(pairs, "model", _MODEL_FIELDS))
    train_config = TrainConfig(**_collect_section(pairs, "train", _TRAIN_FIELDS))
    try:
        seed = int(pairs["seed"])
        epoch = int(pairs["epoch"])
    except KeyError as err:
        raise CheckpointError(f"missing header entry {err.args[0]}") from err

    from .numcore import Tensor2

    def take(name) -> Tensor2:
        if name not in arrays:
            raise CheckpointError(f"tensor {name}: missing from manifest")
        return Tensor2(arrays[name])

    layers = []
    for i in range(model_config.n_layers):
        fields = {f: take(f"layer{i}.{f}") for f in LayerParams.__dataclass_fields__}
        layers.append(LayerParams(**fields))
    params = Params(
        config=model_config,
        tok_emb=take("tok_emb"),
        pos_emb=take("pos_emb"),
        layers=layers,
        final_gain=take("final_gain"),
        final_bias=take("final_bias"),
        unembed=take("unembed"),
    )
    expected = {name for name, _ in params.named_tensors()}
    extra = set(arrays) - expected
    if extra:
        raise CheckpointError(f"unexpected tensors in manifest: {sorted(extra)}")
    return Checkpoint(
        params=params, model_config=model_config, train_config=train_config,
        seed=seed, epoch=epoch,
    )


def save_dataset(path, batch: Batch, spec: TaskSpec, layout: VocabLayout):
    """Dataset artifact in the container format plus a JSON TaskSpec sidecar."""
    header = [f"format {FORMAT_VERSION}", "kind dataset"]
    header += _header_lines_for_config("task", spec, _TASK_FIELDS)
    header += _header_lines_for_config("layout", layout, _LAYOUT_FIELDS)
    arrays = [
        ("tokens", batch.tokens.astype(np.int64)),
        ("targets", batch.targets.astype(np.int64)),
        ("loss_mask", batch.loss_mask.astype(np.bool_)),
    ]
    if batch.meta is not None:
        arrays.append(("meta", batch.meta.astype(np.int64).reshape(-1, 1)))
    if batch.protected is not None:
        arrays.append(("protected", batch.protected.astype(np.bool_)))
    _write_container(path, header, arrays)
    sidecar = {name: _fmt(getattr(spec, name)) for name in _TASK_FIELDS}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_dataset(path) -> tuple[Batch, TaskSpec, VocabLayout]:
    pairs, arrays = _read_container(path)
    if pairs.get("kind") != "dataset":
        raise CheckpointError(f"{path}: container kind {pairs.get('kind')!r} is not a dataset")
    spec = TaskSpec(**_collect_section(pairs, "task", _TASK_FIELDS))
    layout = VocabLayout(**_collect_section(pairs, "layout", _LAYOUT_FIELDS))
    for required in ("tokens", "targets", "loss_mask"):
        if required not in arrays:
            raise CheckpointError(f"tensor {required}: missing from manifest")
    batch = Batch(
        tokens=arrays["tokens"],
        targets=arrays["targets"],
        loss_mask=arrays["loss_mask"].astype(bool),
        meta=arrays["meta"].reshape(-1) if "meta" in arrays else None,
        protected=arrays["protected"].astype(bool) if "protected" in arrays else None,
    )
    return batch, spec, layout


# --------------------------------------------------------------------------
# metrics CSV
# --------------------------------------------------------------------------

METRICS_COLUMNS = ("run_id", "epoch", "phase", "metric", "value", "gate_mode", "seed", "wall_ms")


@dataclass
class MetricsRow:
    run_id: str
    epoch: int
    phase: str  # train | val | eval
    metric: str
    value: float
    gate_mode: str
    seed: int
    wall_ms: float

    def as_csv(self) -> str:
        return ",".join(
            [self.run_id, str(self.epoch), self.phase, self.metric, repr(float(self.value)),
             self.gate_mode, str(self.seed), repr(float(self.wall_ms))]
        )


class MetricsSink:
    """Append-only CSV with one header line and a stable column order."""

    def __init__(self, path):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a")
        if fresh:
            self._fh.write(",".join(METRICS_COLUMNS) + "\n")
            self._fh.flush()

    def write(self, row: MetricsRow):
        self._fh.write(row.as_csv() + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------


@dataclass
class RunSpec:
    model: ModelConfig | None
    train: TrainConfig | None
    task: TaskSpec | None


class ConfigError(ValueError):
    """Config file cannot be parsed or contains unknown keys."""


_SECTION_FIELDS = {"model": _MODEL_FIELDS, "train": _TRAIN_FIELDS, "task": _TASK_FIELDS}


def load_config(path) -> RunSpec:
    """Strict sectioned key-value config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err
    known = set(_SECTION_FIELDS)
    sections = set(parser.sections())
    if not sections:
        raise ConfigError(f"{path}: no sections found")
    unknown = sections - known
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")

    def build(section, fields, factory):
        if section not in parser:
            return None
        raw = dict(parser[section])
        bad = set(raw) - set(fields)
        if bad:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(bad)}")
        kwargs = {}
        for name, text in raw.items():
            try:
                value = _parse(text.strip(), fields[name])
            except ValueError as err:
                raise ConfigError(f"{path}: bad value for {section}.{name}: {text!r}") from err
            if name == "distances" and value is None:
                value = ()
            kwargs[name] = value
        try:
            return factory(**kwargs)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{path}: invalid [{section}] config: {err}") from err

    return RunSpec(
        model=build("model", _MODEL_FIELDS, ModelConfig),
        train=build("train", _TRAIN_FIELDS, TrainConfig),
        task=build("task", _TASK_FIELDS, TaskSpec),
    )


def config_text(spec: RunSpec) -> str:
    """Canonical serialization of a RunSpec (used for the frozen run copy)."""
    lines = []
    for section, fields in _SECTION_FIELDS.items():
        obj = getattr(spec, {"model": "model", "train": "train", "task": "task"}[section])
        if obj is None:
            continue
        lines.append(f"[{section}]")
        for name in fields:
            lines.append(f"{name} = {_fmt(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(path, spec: RunSpec):
    Path(path).write_text(config_text(spec))
