"""
Versioned model checkpoint container (.npz).

Layout:
    header              JSON string: format, version, arch, input shape, layer specs
    <layer>.weight      float64 weights
    <layer>.bias        float64 biases
    <layer>.mask        bool mask (only for masked layers)
    <layer>.levels      float64 quantization levels (only for quantized layers)

Values are always stored as 64-bit floats; loading restores the dtype requested.
"""

import io
import json
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np
import torch
from loguru import logger

from models.errors import CheckpointError
from models.network import ConvNet, LayerSpec

FORMAT_NAME = "admm-nn-checkpoint"
FORMAT_VERSION = 1


def _header(model: ConvNet) -> str:
    return json.dumps({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "arch": model.arch,
        "dtype": "float64",
        "input_shape": list(model.input_shape),
        "layers": [asdict(spec) for spec in model.specs],
        "dense_layers": [asdict(spec) for spec in model.dense_specs],
    }, sort_keys=True)


def save_checkpoint(model: ConvNet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"header": np.array(_header(model))}
    for spec in model.specs:
        arrays[f"{spec.name}.weight"] = model.weight(spec.name).detach().cpu().numpy().astype(np.float64)
        arrays[f"{spec.name}.bias"] = model.bias(spec.name).detach().cpu().numpy().astype(np.float64)
        if spec.name in model.masks:
            arrays[f"{spec.name}.mask"] = model.masks[spec.name].cpu().numpy().astype(bool)
        if spec.name in model.levels:
            arrays[f"{spec.name}.levels"] = np.asarray(model.levels[spec.name], dtype=np.float64)
    # np.savez appends .npz to bare names; write through a buffer to keep the exact path
    buffer = io.BytesIO()
    np.savez_compressed(buffer, **arrays)
    path.write_bytes(buffer.getvalue())
    logger.debug(f"checkpoint saved: {path}")
    return path


def load_checkpoint(path: Union[str, Path], dtype: torch.dtype = torch.float64) -> ConvNet:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    try:
        header = json.loads(str(arrays.pop("header")))
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has no valid header") from exc
    if header.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not an {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')} in {path}")

    specs = [LayerSpec(**entry) for entry in header["layers"]]
    dense = [LayerSpec(**entry) for entry in header["dense_layers"]]
    model = ConvNet(specs, tuple(header["input_shape"]), header["arch"], dense).to(dtype)
    with torch.no_grad():
        for spec in specs:
            model.weight(spec.name).copy_(torch.as_tensor(arrays[f"{spec.name}.weight"], dtype=dtype))
            model.bias(spec.name).copy_(torch.as_tensor(arrays[f"{spec.name}.bias"], dtype=dtype))
            if f"{spec.name}.mask" in arrays:
                model.masks[spec.name] = torch.as_tensor(arrays[f"{spec.name}.mask"])
            if f"{spec.name}.levels" in arrays:
                model.levels[spec.name] = arrays[f"{spec.name}.levels"]
    return model
