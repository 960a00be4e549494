"""Synthetic multi-tenant workload generation.

Workloads mix requests for the four builtin CNNs and four builtin
transformers at a controlled CNN:transformer ratio; the 10% ratio grid from
0% to 100% with a few seeds each forms the standard evaluation suite.
Model picks within a class are uniform and fully seed-determined.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field

from .models import CNN_MODELS, TRANSFORMER_MODELS

RATIO_GRID = tuple(round(r / 10, 1) for r in range(11))

DEFAULT_MODEL_PARAMS = {"image_size": 224, "seq_len": 128,
                        "depth_reduction": 4, "batch": 1}


@dataclass(frozen=True)
class Request:
    request_id: int
    model: str
    arrival_cycle: int


@dataclass(frozen=True)
class Workload:
    name: str
    seed: int
    cnn_ratio: float
    request_count: int
    requests: tuple[Request, ...]
    arrival_model: str = "batch"
    model_params: dict = field(default_factory=lambda: dict(DEFAULT_MODEL_PARAMS))

    @property
    def cnn_requests(self) -> int:
        return sum(1 for r in self.requests if r.model in CNN_MODELS)


def generate(cnn_ratio: float, request_count: int, seed: int, *,
             arrival_model: str = "batch", arrival_interval: int = 0,
             model_params: dict | None = None, name: str | None = None) -> Workload:
    """Draw a request mix at the given CNN ratio (within one request)."""
    if request_count < 1:
        raise ValueError("request_count must be >= 1")
    if not any(abs(cnn_ratio - g) < 1e-9 for g in RATIO_GRID):
        raise ValueError(f"cnn_ratio must be on the 10% grid, got {cnn_ratio}")
    if arrival_model not in ("batch", "rate"):
        raise ValueError(f"unknown arrival model {arrival_model!r}")
    rng = random.Random(seed * 1_000_003
                        + round(cnn_ratio * 10) * 1_009 + request_count)
    n_cnn = round(cnn_ratio * request_count)
    labels = ["cnn"] * n_cnn + ["transformer"] * (request_count - n_cnn)
    rng.shuffle(labels)
    requests = []
    for i, label in enumerate(labels):
        pool = CNN_MODELS if label == "cnn" else TRANSFORMER_MODELS
        arrival = i * arrival_interval if arrival_model == "rate" else 0
        requests.append(Request(i, rng.choice(pool), arrival))
    return Workload(
        name=name or f"ratio{int(round(cnn_ratio * 100)):03d}_s{seed}",
        seed=seed, cnn_ratio=cnn_ratio, request_count=request_count,
        requests=tuple(requests), arrival_model=arrival_model,
        model_params=dict(model_params or DEFAULT_MODEL_PARAMS))


def standard_suite(request_count: int = 16, seeds: tuple[int, ...] = (1, 2, 3),
                   *, model_params: dict | None = None) -> list[Workload]:
    """The evaluation suite: every ratio on the grid times each seed."""
    return [generate(ratio, request_count, seed, model_params=model_params)
            for ratio in RATIO_GRID for seed in seeds]


def save_manifest(workload: Workload, path: str) -> None:
    doc = asdict(workload)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def load_manifest(source) -> Workload:
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if isinstance(source, str) and not source.lstrip().startswith("{"):
            with open(source) as f:
                text = f.read()
        doc = json.loads(text)
    requests = tuple(Request(int(r["request_id"]), r["model"],
                             int(r["arrival_cycle"]))
                     for r in doc["requests"])
    return Workload(doc.get("name", "workload"), int(doc.get("seed", 0)),
                    float(doc.get("cnn_ratio", 0.0)),
                    int(doc.get("request_count", len(requests))), requests,
                    doc.get("arrival_model", "batch"),
                    dict(doc.get("model_params", DEFAULT_MODEL_PARAMS)))
