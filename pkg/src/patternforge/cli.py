"""Command-line entry point for reproducible generate/train/evaluate runs.

Every command resolves its options (flags override an optional ``key = value``
config file, which overrides built-in defaults), writes the resolved values
as JSON beside its outputs, and is deterministic for a fixed seed. Report
paths render a PNG figure next to each delimited output file.

Exit codes: 0 success, 1 runtime or IO failure, 2 usage or validation error.
"""

from __future__ import annotations

import json
import os

import click

from . import figures, metrics
from .data import (CorruptionSpec, DatasetFormatError, Pattern, PatternDataset,
                   ROLE_IDEAL, ROLE_IMPERFECT, corrupt, gen_ideal, load_dataset,
                   save_dataset, split)
from .nn import CheckpointError, Classifier, Refiner, load_checkpoint, save_checkpoint
from .proto import LossWeights, PrototypeSet
from .tensor import Tensor, no_grad
from .train import TrainConfig, run_ablation, train_classifier, train_refiner


def _fail(message: str):
    exc = click.ClickException(message)
    exc.exit_code = 1
    return exc


def _load_config_file(path: str) -> dict:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.UsageError(f"config line is not 'key = value': {line!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Optional key = value file with flag defaults.")
@click.pass_context
def main(ctx, config_path):
    """Generate patterns, train the classifier and refiner, and evaluate."""
    if config_path:
        values = _load_config_file(config_path)
        ctx.default_map = {cmd: values for cmd in main.commands}


def _write_resolved(out_dir: str, command: str, values: dict) -> None:
    payload = {"command": command, **values}
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _ensure_out(out_dir: str) -> str:
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise _fail(f"cannot create output directory {out_dir}: {e}")
    return out_dir


def _load_dataset_or_fail(path: str) -> PatternDataset:
    try:
        return load_dataset(path)
    except (OSError, DatasetFormatError) as e:
        raise _fail(f"cannot load dataset {path}: {e}")


def _load_classifier(path: str):
    try:
        model, extra = load_checkpoint(path)
    except (OSError, CheckpointError) as e:
        raise _fail(f"cannot load classifier checkpoint {path}: {e}")
    if not isinstance(model, Classifier) or "prototypes" not in extra:
        raise _fail(f"{path} is not a classifier checkpoint with prototypes")
    return model, PrototypeSet(extra["prototypes"])


def _load_refiner(path: str) -> Refiner:
    try:
        model, _ = load_checkpoint(path)
    except (OSError, CheckpointError) as e:
        raise _fail(f"cannot load refiner checkpoint {path}: {e}")
    if not isinstance(model, Refiner):
        raise _fail(f"{path} is not a refiner checkpoint")
    return model


def _check_classes(ctx, param, value):
    if value < 2:
        raise click.BadParameter("need at least 2 classes")
    return value


def _check_length(ctx, param, value):
    if value < 64 or value % 4 != 0:
        raise click.BadParameter("length must be >= 64 and divisible by 4")
    return value


def _positive(ctx, param, value):
    if value is not None and value <= 0:
        raise click.BadParameter("must be positive")
    return value


def _fraction(ctx, param, value):
    if not 0.0 < value < 1.0:
        raise click.BadParameter("must be strictly between 0 and 1")
    return value


def _check_p_norm(ctx, param, value):
    if value not in (1, 2):
        raise click.BadParameter("must be 1 or 2")
    return value


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--classes", default=7, show_default=True, callback=_check_classes)
@click.option("--length", default=256, show_default=True, callback=_check_length)
@click.option("--per-class-ideal", default=200, show_default=True, callback=_positive)
@click.option("--per-class-imperfect", default=40, show_default=True,
              callback=_positive)
@click.option("--jitter", default=0.15, show_default=True)
@click.option("--noise-std", default=0.03, show_default=True)
@click.option("--drift-amp", default=0.1, show_default=True)
@click.option("--shift-max", default=8, show_default=True)
@click.option("--split-prob", default=0.9, show_default=True)
@click.option("--amp-jitter", default=1.0, show_default=True)
@click.option("--train-fraction", default=0.5, show_default=True,
              callback=_fraction)
@click.option("--seed", default=0, show_default=True)
def gen_data(out, classes, length, per_class_ideal, per_class_imperfect, jitter,
             noise_std, drift_amp, shift_max, split_prob, amp_jitter,
             train_fraction, seed):
    """Write ideal and imperfect (train/test) datasets plus a manifest."""
    _ensure_out(out)
    try:
        spec = CorruptionSpec(noise_std=noise_std, drift_amp=drift_amp,
                              shift_max=shift_max, split_prob=split_prob,
                              amp_jitter=amp_jitter, seed=seed + 2)
    except ValueError as e:
        raise click.BadParameter(str(e))
    try:
        # ideal data and the imperfect sources describe the same class system
        ideal = gen_ideal(classes, per_class_ideal, length, seed,
                          jitter=jitter, template_seed=seed)
        sources = gen_ideal(classes, per_class_imperfect, length, seed + 1,
                            jitter=jitter, template_seed=seed)
        imperfect = corrupt(sources, spec)
        imp_train, imp_test = split(imperfect, train_fraction, seed + 3)
        files = {
            "ideal": "ideal.pfds",
            "imperfect_train": "imperfect_train.pfds",
            "imperfect_test": "imperfect_test.pfds",
        }
        save_dataset(os.path.join(out, files["ideal"]), ideal)
        save_dataset(os.path.join(out, files["imperfect_train"]), imp_train)
        save_dataset(os.path.join(out, files["imperfect_test"]), imp_test)
        manifest = {
            "command": "gen-data", "files": files, "classes": classes,
            "length": length, "per_class_ideal": per_class_ideal,
            "per_class_imperfect": per_class_imperfect, "jitter": jitter,
            "corruption": {"noise_std": noise_std, "drift_amp": drift_amp,
                           "shift_max": shift_max, "split_prob": split_prob,
                           "amp_jitter": amp_jitter},
            "train_fraction": train_fraction, "seed": seed,
        }
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as e:
        raise _fail(f"write failure: {e}")
    click.echo(f"wrote {len(files)} dataset files to {out}")


@main.command("train-classifier")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--epochs", default=50, show_default=True)
@click.option("--lr", default=1e-3, show_default=True, callback=_positive)
@click.option("--lambda", "lam", default=1.0, show_default=True)
@click.option("--nc", default=8, show_default=True, callback=_positive,
              help="Samples per class per batch.")
@click.option("--batches", default=None, type=int, help="Batches per epoch.")
@click.option("--optimizer", default="adam", show_default=True,
              type=click.Choice(["adam", "rmsprop"]))
@click.option("--proto-update", default="stabilized", show_default=True,
              type=click.Choice(["stabilized", "literal"]))
@click.option("--checkpoint-interval", default=0, show_default=True)
@click.option("--seed", default=0, show_default=True)
def train_classifier_cmd(data, out, epochs, lr, lam, nc, batches, optimizer,
                         proto_update, checkpoint_interval, seed):
    """Train the prototype classifier on an ideal dataset."""
    _ensure_out(out)
    dataset = _load_dataset_or_fail(data)
    try:
        config = TrainConfig(epochs=epochs, batches_per_epoch=batches,
                             per_class_count=nc, optimizer=optimizer,
                             learning_rate=lr, seed=seed,
                             weights=LossWeights(lam=lam),
                             proto_update=proto_update,
                             checkpoint_interval=checkpoint_interval)
    except ValueError as e:
        raise click.BadParameter(str(e))
    try:
        model, protos, history = train_classifier(dataset, config, run_dir=out)
        save_checkpoint(os.path.join(out, "classifier.pfck"), model,
                        extra={"prototypes": protos.prototypes.data})
        if history:
            figures.plot_training_curves(history,
                                         os.path.join(out, "training_curves.png"))
        _write_resolved(out, "train-classifier", {
            "data": data, "out": out, "epochs": epochs, "lr": lr, "lambda": lam,
            "nc": nc, "batches": batches, "optimizer": optimizer,
            "proto_update": proto_update,
            "checkpoint_interval": checkpoint_interval, "seed": seed,
        })
    except (OSError, ValueError) as e:
        raise _fail(str(e))
    last = history[-1].accuracy if history else float("nan")
    click.echo(f"classifier saved to {out} (final train accuracy {last:.3f})")


@main.command("train-refiner")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", "classifier_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--mode", default="targeted", show_default=True,
              type=click.Choice(["targeted", "non-targeted"]))
@click.option("--epochs", default=30, show_default=True)
@click.option("--lr", default=1e-3, show_default=True, callback=_positive)
@click.option("--alpha", default=0.1, show_default=True)
@click.option("--beta", default=0.3, show_default=True)
@click.option("--p-norm", default=1, show_default=True, type=int,
              callback=_check_p_norm)
@click.option("--nc", default=32, show_default=True, callback=_positive,
              help="Batch size.")
@click.option("--batches", default=None, type=int, help="Batches per epoch.")
@click.option("--optimizer", default="adam", show_default=True,
              type=click.Choice(["adam", "rmsprop"]))
@click.option("--checkpoint-interval", default=0, show_default=True)
@click.option("--seed", default=0, show_default=True)
def train_refiner_cmd(data, classifier_path, out, mode, epochs, lr, alpha, beta,
                      p_norm, nc, batches, optimizer, checkpoint_interval, seed):
    """Train the refiner on imperfect data against a frozen classifier."""
    _ensure_out(out)
    dataset = _load_dataset_or_fail(data)
    classifier, protos = _load_classifier(classifier_path)
    try:
        config = TrainConfig(epochs=epochs, batches_per_epoch=batches,
                             per_class_count=nc, optimizer=optimizer,
                             learning_rate=lr, seed=seed, mode=mode,
                             weights=LossWeights(alpha=alpha, beta=beta,
                                                 p_norm=p_norm),
                             checkpoint_interval=checkpoint_interval)
    except ValueError as e:
        raise click.BadParameter(str(e))
    try:
        refiner, history = train_refiner(classifier, protos, dataset, config,
                                         run_dir=out)
        save_checkpoint(os.path.join(out, "refiner.pfck"), refiner)
        if history:
            figures.plot_training_curves(history,
                                         os.path.join(out, "training_curves.png"))
        _write_resolved(out, "train-refiner", {
            "data": data, "classifier": classifier_path, "out": out,
            "mode": mode, "epochs": epochs, "lr": lr, "alpha": alpha,
            "beta": beta, "p_norm": p_norm, "nc": nc, "batches": batches,
            "optimizer": optimizer, "checkpoint_interval": checkpoint_interval,
            "seed": seed,
        })
    except (OSError, ValueError) as e:
        raise _fail(str(e))
    click.echo(f"refiner saved to {out}")


def _primary_role(dataset: PatternDataset) -> str:
    return ROLE_IMPERFECT if dataset.indices(ROLE_IMPERFECT) else ROLE_IDEAL


@main.command("evaluate")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", "classifier_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--refiner", "refiner_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def evaluate_cmd(data, classifier_path, refiner_path, out):
    """Report accuracy, and refinement quality when a refiner is given."""
    _ensure_out(out)
    dataset = _load_dataset_or_fail(data)
    classifier, protos = _load_classifier(classifier_path)
    role = _primary_role(dataset)
    values = dataset.values(role)
    labels = dataset.labels(role)
    try:
        if refiner_path is None:
            acc = metrics.accuracy(classifier, protos, values, labels)
            lines = [f"samples: {labels.size}", f"accuracy raw: {acc:.4f}"]
            with open(os.path.join(out, "report.txt"), "w") as fh:
                fh.write("\n".join(lines) + "\n")
            with open(os.path.join(out, "report.csv"), "w") as fh:
                fh.write("samples,accuracy_raw\n")
                fh.write(f"{labels.size},{acc}\n")
            click.echo(f"accuracy on raw patterns: {acc:.4f}")
        else:
            refiner = _load_refiner(refiner_path)
            paired = all(i in dataset.pairing for i in dataset.indices(role))
            if role == ROLE_IMPERFECT and paired and dataset.pairing:
                report = metrics.evaluate_refinement(refiner, classifier, protos,
                                                     dataset)
                with open(os.path.join(out, "metrics.csv"), "w") as fh:
                    fh.write(report.csv_text())
                with open(os.path.join(out, "report.txt"), "w") as fh:
                    fh.write(report.table_text())
                figures.plot_metrics_summary(report,
                                             os.path.join(out, "metrics.png"))
                click.echo(report.table_text())
            else:
                click.echo("warning: dataset has no ground-truth pairing; "
                           "skipping quality metrics", err=True)
                with no_grad():
                    refined = refiner.forward(Tensor(values)).data
                acc_raw = metrics.accuracy(classifier, protos, values, labels)
                acc_ref = metrics.accuracy(classifier, protos, refined, labels)
                lines = [f"samples: {labels.size}",
                         f"accuracy raw:     {acc_raw:.4f}",
                         f"accuracy refined: {acc_ref:.4f}"]
                with open(os.path.join(out, "report.txt"), "w") as fh:
                    fh.write("\n".join(lines) + "\n")
                click.echo("\n".join(lines))
        _write_resolved(out, "evaluate", {
            "data": data, "classifier": classifier_path,
            "refiner": refiner_path, "out": out,
        })
    except OSError as e:
        raise _fail(f"write failure: {e}")


@main.command("ablate")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", "classifier_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--epochs", default=30, show_default=True)
@click.option("--lr", default=1e-3, show_default=True, callback=_positive)
@click.option("--alpha", default=0.1, show_default=True)
@click.option("--beta", default=0.3, show_default=True)
@click.option("--nc", default=32, show_default=True, callback=_positive)
@click.option("--seed", default=0, show_default=True)
def ablate_cmd(data, classifier_path, out, epochs, lr, alpha, beta, nc, seed):
    """Train refiners with loss terms ablated and compare refined accuracy."""
    _ensure_out(out)
    dataset = _load_dataset_or_fail(data)
    classifier, protos = _load_classifier(classifier_path)
    try:
        train_set, test_set = split(dataset, 0.5, seed)
        config = TrainConfig(epochs=epochs, per_class_count=nc,
                             learning_rate=lr, seed=seed,
                             weights=LossWeights(alpha=alpha, beta=beta))
        report = run_ablation(classifier, protos, train_set, test_set, config)
        with open(os.path.join(out, "ablation.csv"), "w") as fh:
            fh.write(report.csv_text())
        _write_resolved(out, "ablate", {
            "data": data, "classifier": classifier_path, "out": out,
            "epochs": epochs, "lr": lr, "alpha": alpha, "beta": beta,
            "nc": nc, "seed": seed,
        })
    except (OSError, ValueError) as e:
        raise _fail(str(e))
    click.echo(report.csv_text().strip())


@main.command("refine")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--refiner", "refiner_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def refine_cmd(data, refiner_path, out):
    """Refine a dataset; dump side-by-side values and an overlay figure."""
    _ensure_out(out)
    dataset = _load_dataset_or_fail(data)
    refiner = _load_refiner(refiner_path)
    role = _primary_role(dataset)
    idx = dataset.indices(role)
    values = dataset.values(role)
    labels = dataset.labels(role)
    try:
        with no_grad():
            refined = refiner.forward(Tensor(values)).data
        patterns = list(dataset.patterns)
        for row, i in enumerate(idx):
            old = patterns[i]
            patterns[i] = Pattern(refined[row], old.label, old.role)
        manifest = dict(dataset.manifest)
        manifest["refined"] = True
        out_ds = PatternDataset(patterns, dataset.length, dataset.classes,
                                pairing=dataset.pairing, manifest=manifest)
        save_dataset(os.path.join(out, "refined.pfds"), out_ds)

        has_pairs = all(i in dataset.pairing for i in idx) and bool(dataset.pairing)
        ground_truth = dataset.paired_ground_truth() if has_pairs else None
        with open(os.path.join(out, "side_by_side.csv"), "w") as fh:
            fh.write("sample,label,kind,position,value\n")
            for row in range(values.shape[0]):
                series = [("raw", values[row]), ("refined", refined[row])]
                if ground_truth is not None:
                    series.append(("ground-truth", ground_truth[row]))
                for kind, vec in series:
                    for pos, v in enumerate(vec):
                        fh.write(f"{row},{labels[row]},{kind},{pos},{v}\n")
        figures.plot_refinement_examples(values, refined, ground_truth, labels,
                                         os.path.join(out, "refine_examples.png"))
        _write_resolved(out, "refine", {
            "data": data, "refiner": refiner_path, "out": out,
        })
    except (OSError, ValueError) as e:
        raise _fail(str(e))
    click.echo(f"refined {values.shape[0]} patterns into {out}")


@main.command("export-embeddings")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", "classifier_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def export_embeddings_cmd(data, classifier_path, out):
    """Project embeddings to 2-D and write scatter rows plus a figure."""
    _ensure_out(out)
    dataset = _load_dataset_or_fail(data)
    classifier, protos = _load_classifier(classifier_path)
    role = _primary_role(dataset)
    values = dataset.values(role)
    labels = dataset.labels(role)
    try:
        projected = metrics.export_embeddings_2d(
            classifier, values, labels, os.path.join(out, "embeddings.csv"))
        figures.plot_embeddings(projected, labels,
                                os.path.join(out, "embeddings.png"))
        _write_resolved(out, "export-embeddings", {
            "data": data, "classifier": classifier_path, "out": out,
        })
    except (OSError, ValueError) as e:
        raise _fail(str(e))
    click.echo(f"exported {values.shape[0]} embedding projections to {out}")


if __name__ == "__main__":
    main()
