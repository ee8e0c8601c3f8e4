"""Policy checkpoints: ``b"MAPC"``, u32 header length, JSON header, little-endian float64 payload.

A checkpoint carries everything transfer training freezes: the policy
parameters, the task network whose feature extractor feeds the policy, the
sampler distribution and the learned inner learning rate.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from metaaug.augment import DEFAULT_CATALOG
from metaaug.data import atomic_write
from metaaug.nn import DenseLayer, TaskNetwork
from metaaug.policy import PolicyNetwork

MAGIC = b"MAPC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    policy: PolicyNetwork
    task_net: TaskNetwork
    p: np.ndarray
    log_alpha: float
    catalog_hash: str


def dumps(ckpt: Checkpoint) -> bytes:
    tensors = [("policy", i, a) for i, a in enumerate(ckpt.policy.params())]
    tensors += [("task", i, a) for i, a in enumerate(ckpt.task_net.params())]
    tensors += [("sampler_p", 0, np.asarray(ckpt.p)), ("log_alpha", 0, np.array([ckpt.log_alpha]))]
    header = {
        "format": "metaaug-checkpoint",
        "version": VERSION,
        "catalog_hash": ckpt.catalog_hash,
        "policy": {
            "feature_dim": ckpt.policy.feature_dim,
            "embed_dim": ckpt.policy.embed_dim,
            "hidden": ckpt.policy.branch_feat.out_size,
        },
        "task": {
            "activations": [l.activation for l in ckpt.task_net.layers],
            "feature_index": ckpt.task_net.feature_index,
        },
        "tensors": [{"group": g, "index": i, "shape": list(a.shape)} for g, i, a in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, _, a in tensors)
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def loads(blob: bytes, expected_catalog_hash=None) -> Checkpoint:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a metaaug checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    try:
        header = json.loads(blob[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if expected_catalog_hash is not None and header["catalog_hash"] != expected_catalog_hash:
        raise CheckpointError(
            f"catalog hash mismatch: checkpoint {header['catalog_hash']}, expected {expected_catalog_hash}"
        )
    pos = 8 + hlen
    groups = {"policy": [], "task": [], "sampler_p": [], "log_alpha": []}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        size = int(np.prod(shape)) if shape else 1
        end = pos + 8 * size
        if end > len(blob):
            raise CheckpointError(f"truncated payload at offset {len(blob)}")
        groups[t["group"]].append(np.frombuffer(blob, "<f8", size, pos).reshape(shape).astype(np.float64))
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after payload")
    pp = groups["policy"]
    policy = PolicyNetwork(DenseLayer(pp[0], pp[1], "relu"), DenseLayer(pp[2], pp[3], "relu"),
                           DenseLayer(pp[4], pp[5], "sigmoid"))
    tp = groups["task"]
    acts = header["task"]["activations"]
    layers = [DenseLayer(w, b, a) for w, b, a in zip(tp[0::2], tp[1::2], acts)]
    net = TaskNetwork(layers, header["task"]["feature_index"])
    return Checkpoint(policy, net, groups["sampler_p"][0], float(groups["log_alpha"][0][0]),
                      header["catalog_hash"])


def save_checkpoint(ckpt: Checkpoint, path):
    atomic_write(path, dumps(ckpt))


def load_checkpoint(path, expected_catalog_hash=None) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read(), expected_catalog_hash)


def default_catalog_hash():
    return DEFAULT_CATALOG.hash()
