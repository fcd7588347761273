"""The bundled desk-scale fixture: a 2-16-16-4 MLP on 4-class 2-D blobs."""

from __future__ import annotations

from dataclasses import dataclass

from .data import Dataset, blobs2d
from .network import QNetwork
from .quantize import quantize
from .train import FloatModel, train_reference_mlp

TOPOLOGY = (2, 16, 16, 4)
EPOCHS = 1000
DEFAULT_SEED = 42


@dataclass(frozen=True)
class Fixture:
    float_model: FloatModel
    net: QNetwork
    train: Dataset
    test: Dataset

    def accuracies(self) -> dict:
        from . import engine

        def q_acc(ds):
            _, pred = engine.forward_batch(self.net, engine.quantize_input(self.net, ds.features))
            return float((pred == ds.labels).mean())

        return {
            "float_train": self.float_model.accuracy(self.train),
            "float_test": self.float_model.accuracy(self.test),
            "quant_train": q_acc(self.train),
            "quant_test": q_acc(self.test),
        }


def build_fixture(seed: int = DEFAULT_SEED) -> Fixture:
    train = blobs2d("train", seed)
    test = blobs2d("test", seed)
    fm = train_reference_mlp(train, TOPOLOGY, epochs=EPOCHS, seed=seed)
    return Fixture(fm, quantize(fm, train), train, test)
