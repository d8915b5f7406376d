"""Checkpoint archives: named parameter arrays plus an embedded JSON meta blob.

A checkpoint is a single ``.npz`` file whose keys are parameter names
(e.g. ``unet.enc.0.blocks.0.sa.q.weight``) and whose ``__meta__`` entry
holds a JSON string with everything that is not an array (config, step
count, latent scale, vocabulary, ...).
"""

import json

import numpy as np

META_KEY = "__meta__"


def save_checkpoint(path, arrays, meta):
    """Write named float arrays and a JSON-serializable meta dict to `path`."""
    payload = {name: np.asarray(value) for name, value in arrays.items()}
    payload[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path):
    """Return (arrays: dict[str, np.ndarray], meta: dict)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data[META_KEY]))
        arrays = {k: data[k] for k in data.files if k != META_KEY}
    return arrays, meta


def state_dict_arrays(module):
    """Torch state dict as plain float32/64 numpy arrays."""
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module, arrays, prefix=""):
    """Load numpy arrays into a torch module's state dict (strict on names)."""
    import torch

    state = {}
    for key, value in arrays.items():
        if prefix and not key.startswith(prefix):
            continue
        state[key[len(prefix):]] = torch.from_numpy(np.asarray(value))
    module.load_state_dict(state, strict=True)
