"""
Training service
Minimises the negative tree log-likelihood with Adagrad and keeps the best validation model
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from config import Hyperparameters
from services.corpus_service import Example, MixedSampler, SamplerState
from services.evaluation_service import tree_accuracy
from services.grammar_service import GrammarSchema
from services.neural_service import adagrad_step
from services.parser_service import ParserModel, decode_corpus, load_checkpoint, tree_log_likelihood
from utils.errors import TrainingError

logger = structlog.get_logger(__name__)

MODEL_FILE = "model.npz"
STATE_FILE = "trainer_state.npz"


@dataclass
class CurvePoint:
    step: int
    train_loss: float
    valid_accuracy: float


@dataclass
class TrainingResult:
    """Best model found plus the validation curve"""
    model: ParserModel
    curve: List[CurvePoint] = field(default_factory=list)
    best_step: int = 0
    best_accuracy: float = 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(p) for p in self.curve], columns=["step", "train_loss", "valid_accuracy"])


class ParserTrainer:
    """
    Owns one model's parameters for the duration of a training run

    Each step draws a batch from the sampler, accumulates gradients of ``-L / batch_size`` over
    its examples and applies one Adagrad update.
    """

    def __init__(self, model: ParserModel, sampler: MixedSampler, valid: Sequence[Example],
                 hyper: Optional[Hyperparameters] = None, seed: int = 0,
                 output_dir: Optional[Union[str, Path]] = None):
        self.model = model
        self.sampler = sampler
        self.valid = list(valid)
        self.hyper = hyper or model.hyper
        self.rng = np.random.default_rng([seed, 1])
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.step = 0
        self.curve: List[CurvePoint] = []
        self.best_step = 0
        self.best_accuracy = -1.0
        self.best_values: Optional[Dict[str, np.ndarray]] = None
        self._interval_losses: List[float] = []

    def train_step(self) -> float:
        """
        Run one optimisation step

        Returns:
            Mean negative log-likelihood over the batch

        Raises:
            TrainingError: If an example yields a non-finite loss
        """
        batch = self.sampler.batch(self.hyper.batch_size)
        scale = 1.0 / len(batch)
        total = 0.0
        self.model.store.zero_grad()
        for example in batch:
            likelihood = tree_log_likelihood(self.model, example.tokens, example.tree,
                                             self.hyper.label_smoothing, training=True, rng=self.rng)
            value = likelihood.item()
            if not np.isfinite(value):
                logger.error("Non-finite loss", step=self.step, sentence=example.sentence, value=value)
                raise TrainingError("Non-finite loss", {"step": self.step, "sentence": example.sentence,
                                                        "value": value})
            (likelihood * -scale).backward()
            total -= value * scale
        adagrad_step(self.model.store, self.hyper.learning_rate)
        self.step += 1
        return total

    def evaluate(self) -> float:
        """Greedy tree accuracy on the validation set"""
        if not self.valid:
            return 0.0
        predictions = decode_corpus(self.model, [e.tokens for e in self.valid])
        return tree_accuracy(list(zip(predictions, [e.tree for e in self.valid])))

    def _checkpoint(self) -> None:
        train_loss = float(np.mean(self._interval_losses)) if self._interval_losses else float("nan")
        self._interval_losses = []
        accuracy = self.evaluate()
        self.curve.append(CurvePoint(self.step, train_loss, accuracy))
        improved = accuracy > self.best_accuracy
        if improved:
            self.best_accuracy = accuracy
            self.best_step = self.step
            self.best_values = self.model.store.snapshot()
        logger.info("Validation", step=self.step, train_loss=train_loss, accuracy=accuracy,
                    best_accuracy=self.best_accuracy, improved=improved)
        if self.output_dir is not None:
            self.save_state(self.output_dir / STATE_FILE)

    def run(self, steps: Optional[int] = None) -> TrainingResult:
        """
        Train until ``steps`` total steps have been taken

        Validation runs at the start, every ``eval_interval`` steps and at the end. The model is
        left holding the parameters of the best validation checkpoint.
        """
        steps = self.hyper.steps if steps is None else steps
        logger.info("Training started", variant=self.model.variant.value, start_step=self.step,
                    steps=steps, batch_size=self.hyper.batch_size)
        try:
            if not self.curve:
                self._checkpoint()
            while self.step < steps:
                self._interval_losses.append(self.train_step())
                if self.step % self.hyper.eval_interval == 0 or self.step == steps:
                    self._checkpoint()
        except Exception as e:
            logger.error("Training failed", step=self.step, error=str(e))
            raise

        if self.best_values is not None:
            self.model.store.restore(self.best_values)
        if self.output_dir is not None:
            self.model.save(self.output_dir / MODEL_FILE,
                            metadata={"best_step": self.best_step, "best_accuracy": self.best_accuracy})
        logger.info("Training finished", steps=self.step, best_step=self.best_step,
                    best_accuracy=self.best_accuracy)
        return TrainingResult(self.model, list(self.curve), self.best_step, self.best_accuracy)

    def save_state(self, path: Union[str, Path]) -> Path:
        """Write everything needed to continue this run bit-exactly"""
        metadata: Dict[str, Any] = {
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "sampler_state": self.sampler.state.to_dict(),
            "best_step": self.best_step,
            "best_accuracy": self.best_accuracy,
            "curve": [asdict(p) for p in self.curve],
            "interval_losses": self._interval_losses,
        }
        extras = {f"best.{k}": v for k, v in (self.best_values or {}).items()}
        return self.model.save(path, metadata=metadata, extras=extras)

    @classmethod
    def resume(cls, path: Union[str, Path], schema: GrammarSchema, sampler: MixedSampler,
               valid: Sequence[Example], hyper: Optional[Hyperparameters] = None,
               output_dir: Optional[Union[str, Path]] = None) -> "ParserTrainer":
        """Rebuild a trainer from ``save_state`` output"""
        model, meta, extras = load_checkpoint(path, schema)
        if "step" not in meta:
            raise TrainingError("Checkpoint holds no trainer state", {"path": str(path)})
        trainer = cls(model, sampler, valid, hyper or model.hyper, output_dir=output_dir)
        trainer.step = int(meta["step"])
        trainer.rng.bit_generator.state = meta["rng"]
        sampler.state = SamplerState.from_dict(meta["sampler_state"])
        trainer.best_step = int(meta["best_step"])
        trainer.best_accuracy = float(meta["best_accuracy"])
        trainer.curve = [CurvePoint(**p) for p in meta["curve"]]
        trainer._interval_losses = list(meta.get("interval_losses", []))
        best = {k[len("best."):]: v for k, v in extras.items() if k.startswith("best.")}
        trainer.best_values = best or None
        logger.info("Training resumed", path=str(path), step=trainer.step)
        return trainer


def train_parser(model: ParserModel, sampler: MixedSampler, hyper: Hyperparameters,
                 valid: Sequence[Example], seed: int = 0,
                 output_dir: Optional[Union[str, Path]] = None) -> TrainingResult:
    """
    Train a parser and return the checkpoint with the best validation tree accuracy

    Args:
        model: Freshly built or partially trained model
        sampler: Source of training batches over the model's schema
        hyper: Optimisation settings
        valid: Held-out examples for model selection
        seed: Seed for dropout noise
        output_dir: Where ``model.npz`` and ``trainer_state.npz`` go, if given

    Returns:
        TrainingResult
    """
    trainer = ParserTrainer(model, sampler, valid, hyper, seed, output_dir)
    return trainer.run(hyper.steps)
