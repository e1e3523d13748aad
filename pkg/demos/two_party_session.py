"""Train over a real TCP connection and check it against in-process training.

    python demos/two_party_session.py

The server thread only ever sees representations and feature gradients.
"""

import torch
from collections import Counter

from splitmi.data import DatasetSpec, make_splits
from splitmi.experiment import desk_defense
from splitmi.model import build_default_architecture
from splitmi.objectives import AuxClassifier, AuxGenerator
from splitmi.protocol import Session, run_session
from splitmi.trainer import train


def parts(seed):
    model = build_default_architecture((1, 16, 16), 10, seed=seed)
    return model, AuxGenerator.for_model(model, seed + 1, 4.0), AuxClassifier.for_model(model, seed=seed + 2, layers=1)


def main():
    torch.set_num_threads(1)
    splits = make_splits(DatasetSpec(size=600, seed=5))
    cfg = desk_defense(lambda_d=0.2, lambda_l=0.2, seed=5)
    cfg.epochs = 3

    local = train(*parts(5), splits.train, cfg, splits.test)
    model, gen, aux = parts(5)
    session = Session(model, splits.train, cfg, gen, aux, transport="socket")
    remote = run_session(session, splits.test)

    same = all(a == b for a, b in zip(local.steps, remote.steps))
    print(f"{len(remote.steps)} batches; per-step losses identical to local training: {same}")
    print("test accuracy local/socket:", local.epochs[-1]["test_accuracy"], remote.epochs[-1]["test_accuracy"])
    print("frames by type:", dict(Counter(m.msg_type for m in session.messages)))
    print("bytes on the wire:", sum(m.nbytes for m in session.messages))


if __name__ == "__main__":
    main()
