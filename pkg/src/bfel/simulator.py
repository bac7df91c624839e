"""Experiment orchestration: config parsing, round loop, metrics, ledger.

Configs are flat key=value text files. Each run emits a versioned metrics
CSV, a binary final-model file, and (optionally) a signed chain log with
one block per round. Runs are bit-reproducible under a fixed seed: the
clock defaults to a simulated one.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import fedavg, fedcurv, ledger, models

CSV_HEADER = (
    "schema_version,round,global_acc,client_acc_mean,client_acc_min,"
    "client_acc_max,divergence,elapsed_ms"
)
CSV_SCHEMA_VERSION = 1
MODEL_MAGIC = b"BFELMODL"
MODEL_VERSION = 1


class ConfigError(ValueError):
    """Bad or missing configuration; reported before any training starts."""


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedcurv"  # fedcurv | fedavg | base
    model: str = "mlp"  # mlp | cnn
    mlp_hidden: tuple[int, ...] = (64,)
    dataset: str = "synth"  # synth | idx | bfeldata
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    bfeldata_train: str = ""
    bfeldata_test: str = ""
    synth_classes: int = 2
    synth_per_class: int = 100
    synth_dim: int = 2
    synth_spread: float = 0.15
    test_fraction: float = 0.2
    clients: int = 5
    partition: str = "iid"  # iid | noniid_shards
    shards_per_client: int = 2
    rounds: int = 20
    lam: float = 0.1
    epochs: int = 1
    eta_local: float = 0.01
    eta_global: float = 1.0
    epsilon: float = 1e-8
    batch_size: int = 20
    client_fraction: float = 1.0
    lr_decay: bool = False
    ledger_enabled: bool = True
    clock: str = "simulated"  # simulated | wall
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.algorithm not in ("fedcurv", "fedavg", "base"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.model not in ("mlp", "cnn"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.dataset not in ("synth", "idx", "bfeldata"):
            raise ConfigError(f"unknown dataset source {self.dataset!r}")
        if self.partition not in ("iid", "noniid_shards"):
            raise ConfigError(f"unknown partition mode {self.partition!r}")
        if self.clock not in ("simulated", "wall"):
            raise ConfigError(f"unknown clock {self.clock!r}")
        for key in ("idx_images", "idx_labels", "idx_test_images",
                    "idx_test_labels", "bfeldata_train", "bfeldata_test"):
            path = getattr(self, key)
            if path and not Path(path).exists():
                raise ConfigError(f"{key}: file not found: {path}")

    def hyperparams(self) -> fedcurv.HyperParams:
        return fedcurv.HyperParams(
            lam=self.lam,
            local_epochs=self.epochs,
            eta_local=self.eta_local,
            eta_global=self.eta_global,
            epsilon=self.epsilon,
            batch_size=self.batch_size,
            client_fraction=self.client_fraction,
            lr_decay=self.lr_decay,
        )


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False, "on": True, "off": False}

_FIELD_ALIASES = {"lambda": "lam", "ledger": "ledger_enabled"}


def parse_config(path) -> ExperimentConfig:
    """Parse a flat key=value config file (# starts a comment)."""
    kwargs = {}
    types = {f.name: f.type for f in ExperimentConfig.__dataclass_fields__.values()}
    fields = ExperimentConfig.__dataclass_fields__
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _FIELD_ALIASES.get(key, key)
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        default = fields[key].default
        try:
            if isinstance(default, bool):
                kwargs[key] = _BOOL[value.lower()]
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            elif isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
            else:
                kwargs[key] = value
        except (KeyError, ValueError):
            raise ConfigError(
                f"{path}:{lineno}: bad value {value!r} for {key!r}"
            ) from None
    return ExperimentConfig(**kwargs)


def evaluate(
    spec: models.ModelSpec, params: models.ParameterVector, test_dataset
) -> float:
    """Argmax-prediction accuracy; ties resolve toward the lowest class."""
    if len(test_dataset) == 0:
        raise fedcurv.EmptyDatasetError("cannot evaluate on an empty dataset")
    return models.accuracy(spec, params, test_dataset.as_batch())


def save_model(params: models.ParameterVector, path) -> None:
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<IQ", MODEL_VERSION, params.values.shape[0]))
        f.write(params.values.astype("<f8").tobytes())


def load_model_values(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != MODEL_MAGIC:
        raise ConfigError(f"{path}: not a model file")
    version, count = struct.unpack("<IQ", blob[8:20])
    if version != MODEL_VERSION:
        raise ConfigError(f"{path}: unsupported model version {version}")
    return np.frombuffer(blob[20 : 20 + count * 8], dtype="<f8").copy()


def _load_datasets(config: ExperimentConfig):
    if config.dataset == "idx":
        train = data_mod.load_idx(config.idx_images, config.idx_labels)
        if config.idx_test_images:
            test = data_mod.load_idx(config.idx_test_images, config.idx_test_labels)
            return train, test
    elif config.dataset == "bfeldata":
        train = data_mod.load_bfeldata(config.bfeldata_train)
        if config.bfeldata_test:
            test = data_mod.load_bfeldata(config.bfeldata_test)
            return train, test
    else:
        train = data_mod.synth_blobs(
            config.synth_classes,
            config.synth_per_class,
            config.synth_dim,
            config.synth_spread,
            seed=config.seed,
        )
    # no explicit test set: seeded holdout split
    n = len(train)
    rng = np.random.default_rng([config.seed, 0x7E57])
    order = rng.permutation(n)
    n_test = max(1, int(round(config.test_fraction * n)))
    return train.subset(np.sort(order[n_test:])), train.subset(np.sort(order[:n_test]))


def _build_spec(config: ExperimentConfig, train) -> models.ModelSpec:
    sample_shape = train.samples.shape[1:]
    if config.model == "mlp":
        return models.ModelSpec(
            kind="mlp",
            input_shape=sample_shape,
            classes=train.class_count,
            hidden=config.mlp_hidden,
        )
    return models.ModelSpec(
        kind="cnn", input_shape=sample_shape, classes=train.class_count
    )


@dataclass
class RoundMetrics:
    round: int
    global_acc: float
    client_acc_mean: float
    client_acc_min: float
    client_acc_max: float
    divergence: float
    elapsed_ms: float

    def csv_row(self) -> str:
        return ",".join(
            [
                str(CSV_SCHEMA_VERSION),
                str(self.round),
                repr(self.global_acc),
                repr(self.client_acc_mean),
                repr(self.client_acc_min),
                repr(self.client_acc_max),
                repr(self.divergence),
                repr(self.elapsed_ms),
            ]
        )


def _fedavg_round(state, clients, hp, rng, test_set, epoch_offset):
    """One FedAvg round, consuming the rng identically to fedcurv.run_round."""
    sampled = fedcurv.sample_clients(len(clients), hp.client_fraction, rng)
    seeds = {cid: int(rng.integers(2**63)) for cid in sampled}
    updates = [
        fedavg.PlainClientUpdate(
            client_id=cid,
            round=state.round,
            theta_local=fedavg.local_train_plain(
                state.spec, state.theta_global, clients[cid], hp,
                seeds[cid], epoch_offset,
            ),
            sample_count=len(clients[cid]),
        )
        for cid in sampled
    ]
    new_theta = fedavg.average_models(updates)
    new_state = fedcurv.GlobalModelState(new_theta, state.round + 1, state.spec)
    metrics = {
        "sampled_clients": sampled,
        "divergence": fedcurv.divergence([u.theta_local for u in updates]),
    }
    if test_set is not None:
        batch = test_set.as_batch()
        metrics["client_accuracy"] = [
            models.accuracy(state.spec, u.theta_local, batch) for u in updates
        ]
        metrics["global_accuracy"] = models.accuracy(
            state.spec, new_state.theta_global, batch
        )
    return new_state, updates, metrics


def run_experiment(config: ExperimentConfig) -> dict:
    """Run the configured algorithm; write metrics CSV, model, chain log."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train, test = _load_datasets(config)
    spec = _build_spec(config, train)
    hp = config.hyperparams()

    if config.algorithm == "base":
        clients = [train]
        hp = fedcurv.HyperParams(
            lam=hp.lam, local_epochs=hp.local_epochs, eta_local=hp.eta_local,
            eta_global=hp.eta_global, epsilon=hp.epsilon,
            batch_size=hp.batch_size, client_fraction=1.0, lr_decay=hp.lr_decay,
        )
    else:
        plan = data_mod.PartitionPlan(
            client_count=config.clients,
            mode=data_mod.PartitionMode(config.partition),
            shards_per_client=config.shards_per_client,
            seed=config.seed,
        )
        clients = data_mod.partition(train, plan)

    theta0 = models.init_params(spec, config.seed)
    state = fedcurv.GlobalModelState(theta0, 0, spec)
    rng = np.random.default_rng([config.seed, 0x1A])
    clock_rng = np.random.default_rng([config.seed, 0x2B])

    server_key = ledger.keygen(config.seed * 100003)
    client_keys = {
        cid: ledger.keygen(config.seed * 100003 + cid + 1)
        for cid in range(len(clients))
    }
    chain = ledger.new_chain() if config.ledger_enabled else None

    rows: list[RoundMetrics] = []
    sim_clock_ms = 0.0
    wall_start = time.monotonic()
    for round_idx in range(config.rounds):
        epoch_offset = round_idx * hp.local_epochs if hp.lr_decay else 0
        if config.algorithm == "fedcurv":
            state, updates, metrics = fedcurv.run_round(
                state, clients, hp, rng, test_set=test, epoch_offset=epoch_offset
            )
            digests = [
                (u.client_id, ledger.digest_client_update(u)) for u in updates
            ]
        else:
            state, updates, metrics = _fedavg_round(
                state, clients, hp, rng, test_set=test, epoch_offset=epoch_offset
            )
            digests = [
                (u.client_id, ledger.digest_plain_update(u)) for u in updates
            ]

        if config.clock == "wall":
            elapsed = (time.monotonic() - wall_start) * 1000.0
        else:
            sim_clock_ms += 100.0 * len(updates) + 10.0 * float(clock_rng.random())
            elapsed = sim_clock_ms

        accs = metrics["client_accuracy"]
        rows.append(
            RoundMetrics(
                round=round_idx + 1,
                global_acc=metrics["global_accuracy"],
                client_acc_mean=float(np.mean(accs)),
                client_acc_min=float(np.min(accs)),
                client_acc_max=float(np.max(accs)),
                divergence=metrics["divergence"],
                elapsed_ms=elapsed,
            )
        )

        if chain is not None:
            ts = (round_idx + 1) * 1000
            txs = [
                ledger.make_transaction(
                    ledger.TxKind.CLIENT_UPDATE, digest, client_keys[cid], ts
                )
                for cid, digest in digests
            ]
            txs.append(
                ledger.make_transaction(
                    ledger.TxKind.GLOBAL_MODEL,
                    ledger.digest_global_model(state.theta_global.values, state.round),
                    server_key,
                    ts,
                )
            )
            chain = ledger.append_block(chain, txs, server_key, timestamp=ts)

    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(
        "\n".join([CSV_HEADER] + [r.csv_row() for r in rows]) + "\n"
    )
    model_path = out_dir / "model.bin"
    save_model(state.theta_global, model_path)
    result = {
        "metrics_csv": str(metrics_path),
        "model_file": str(model_path),
        "final_global_acc": rows[-1].global_acc,
        "rounds": config.rounds,
    }
    if chain is not None:
        chain_path = out_dir / "chain.log"
        chain_path.write_bytes(ledger.export_chain(chain))
        result["chain_log"] = str(chain_path)
        ok, bad = ledger.validate_chain(chain)
        if not ok:
            raise RuntimeError(f"chain failed self-validation at block {bad}")
    return result
