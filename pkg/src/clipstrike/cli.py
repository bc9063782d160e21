"""Command-line entrypoint: ingest, train, attack, evaluate, baseline,
ablate-prompts, export-images.

Exit codes: 0 success, 1 user/config error, 2 internal error. Structured
logs go to stderr; artifacts land under ``<out>/<run-id>/`` together with
the exact configuration snapshot that produced them.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .common import ClipstrikeError, ConfigError, substream_seed
from .baselines import BaselineAttack, BaselineSpec
from .clip_guidance import PromptTemplate
from .config import (
    RunConfig,
    assemble_training,
    build_dataset,
    build_surrogate_model,
    fixture_run_config,
    load_run_config,
    write_snapshot,
)
from .data import batch_iter, ingest_fixture, ingest_image_folder, write_sample
from .evaluator import (
    EvalReport,
    GeneratorAttack,
    IdentityAttack,
    VictimClassifier,
    ablate_prompts,
    evaluate_matrix,
    export_image_grids,
)
from .generator import build_generator
from .surrogate import fit_fixture_cnn, load_classifier
from .trainer import load_checkpoint, train

logger = logging.getLogger("clipstrike")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; report them as user errors (1)
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 1
    except ClipstrikeError as exc:
        logger.error("internal error: %s", exc)
        return 2
    except Exception:  # pragma: no cover - last-resort diagnostics
        logger.exception("unexpected internal error")
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clipstrike",
        description="Saliency-gated generative adversarial attacks guided by "
        "image-text embeddings",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--run-id", default=None, help="artifact directory name")
        p.add_argument("--out", default="runs", help="output root directory")
        p.add_argument("--force", action="store_true", help="overwrite existing run-id")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("ingest", help="materialize a dataset in the on-disk layout")
    common(p)
    p.add_argument("--dataset", required=True, help="synthetic-fixture | image-folder | cifar10")
    p.add_argument("--root", required=True, help="destination dataset root")
    p.add_argument("--source", default=None, help="source tree/archive for converters")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the perturbation generator")
    common(p)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="write perturbed images for a dataset")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="run the attack/victim evaluation matrix")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True,
                   help="generator checkpoint, or 'identity' for the no-op attack")
    p.add_argument("--victims", required=True, help="comma-separated classifier ids")
    p.add_argument("--victim-weights", default=None, help="pretrained | random | state-dict path")
    p.add_argument("--data", default=None, help="dataset root override")
    p.add_argument("--split", default="test")
    p.add_argument("--report", default="report.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="run an FGSM/PGD baseline attack")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="dataset root override")
    p.add_argument("--kind", choices=("fgsm", "pgd"), required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--victims", required=True)
    p.add_argument("--victim-weights", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--report", default="report.json")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate-prompts", help="train+evaluate one run per prompt template")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--templates", required=True,
                   help="semicolon-separated template strings")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-images", help="write raw/perturbed/saliency grids")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=cmd_export)

    return parser


def _prepare_run_dir(args, default_id: str) -> Path:
    run_id = args.run_id or default_id
    run_dir = Path(args.out) / run_id
    if run_dir.exists() and not args.force:
        raise ConfigError(
            f"run directory already exists: {run_dir} (pass --force to overwrite)"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    return load_run_config(args.config, overrides)


def _restore_generator(config: RunConfig, checkpoint: Path):
    import torch

    gen = build_generator(config.generator, substream_seed(config.seed, "generator"))
    optimizer = torch.optim.AdamW(gen.parameters(), lr=config.train.lr)
    load_checkpoint(checkpoint, gen, optimizer, config.config_hash())
    gen.eval()
    return gen


def _build_victims(config: RunConfig, names, weights_override, dataset):
    victims = []
    multilabel = dataset.vocabulary.multilabel
    for name in names:
        if name.startswith("fixture-cnn"):
            # fixture-cnn = white-box twin of the surrogate;
            # fixture-cnn-alt = independently seeded black-box stand-in
            substream = "surrogate" if name == "fixture-cnn" else f"victim-{name}"

            def builder(sub=substream):
                model = fit_fixture_cnn(
                    build_dataset(config, "train"),
                    image_size=config.data.image_size,
                    seed=substream_seed(config.seed, sub),
                )
                return VictimClassifier(name, model, multilabel)

        else:
            weights = weights_override or "pretrained"

            def builder(arch=name, weights=weights):
                model = load_classifier(
                    arch, weights=weights, num_classes=len(dataset.vocabulary)
                )
                return VictimClassifier(arch, model, multilabel)

        victims.append((name, builder))
    return victims


def cmd_ingest(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.dataset == "synthetic-fixture":
        ingest_fixture(Path(args.root), seed=seed)
    elif args.dataset == "image-folder":
        if not args.source:
            raise ConfigError("--source is required for image-folder ingestion")
        ingest_image_folder(Path(args.source), Path(args.root))
    elif args.dataset == "cifar10":
        _ingest_cifar10(args)
    else:
        raise ConfigError(f"unknown dataset for ingest: {args.dataset!r}")
    logger.info("ingested %s into %s", args.dataset, args.root)
    return 0


def _ingest_cifar10(args) -> None:
    """Convert a locally downloaded CIFAR-10 archive (no network access)."""
    import numpy as np
    import torch

    from .data import LabelVocabulary, Sample

    if not args.source:
        raise ConfigError("--source must point at the extracted CIFAR-10 directory")
    try:
        from torchvision.datasets import CIFAR10
    except ImportError:
        raise ConfigError("cifar10 ingestion requires torchvision") from None
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    for split, train_flag in (("train", True), ("test", False)):
        ds = CIFAR10(args.source, train=train_flag, download=False)
        vocab = LabelVocabulary(classes=tuple(ds.classes), multilabel=False)
        vocab.to_file(root / "classes.txt")
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        for i in range(len(ds)):
            arr = np.asarray(ds[i][0], dtype=np.float32) / 255.0
            sample = Sample(
                image=torch.from_numpy(arr).permute(2, 0, 1).contiguous(),
                labels=frozenset({int(ds[i][1])}),
                id=f"{split}-{i:06d}",
            )
            write_sample(split_dir, sample, vocab)


def cmd_train(args) -> int:
    config = _load_config(args)
    run_dir = _prepare_run_dir(args, f"train-{config.config_hash()[:8]}")
    write_snapshot(config, run_dir)
    train_config, dataset, components = assemble_training(config)
    final = train(train_config, dataset, components, run_dir, config.config_hash())
    logger.info("final checkpoint: %s", final)
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args)
    run_dir = _prepare_run_dir(args, f"attack-{config.config_hash()[:8]}")
    write_snapshot(config, run_dir)
    gen = _restore_generator(config, Path(args.checkpoint))
    dataset = build_dataset(config, args.split)
    attack = GeneratorAttack(gen, gating=config.generator.saliency_gating)
    out_split = run_dir / args.split
    out_split.mkdir(parents=True, exist_ok=True)
    dataset.vocabulary.to_file(run_dir / "classes.txt")
    from .data import Sample

    count = 0
    for batch in batch_iter(dataset, 8, shuffle=False, target_size=config.data.image_size):
        adv = attack.perturb(batch)
        for i, sample_id in enumerate(batch.ids):
            write_sample(
                out_split,
                Sample(image=adv[i], labels=batch.labels[i], id=sample_id),
                dataset.vocabulary,
            )
            count += 1
    logger.info("wrote %d perturbed samples to %s", count, out_split)
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    if args.data:
        config.data.root = args.data
    run_dir = _prepare_run_dir(args, f"eval-{config.config_hash()[:8]}")
    write_snapshot(config, run_dir)
    dataset = build_dataset(config, args.split)
    if args.checkpoint == "identity":
        attack = IdentityAttack()
    else:
        gen = _restore_generator(config, Path(args.checkpoint))
        attack = GeneratorAttack(gen, gating=config.generator.saliency_gating)
    victims = _build_victims(
        config, args.victims.split(","), args.victim_weights, dataset
    )
    report = evaluate_matrix(
        attack,
        victims,
        dataset,
        target_size=config.data.image_size,
        surrogate_name=config.surrogate.arch,
        config_hash=config.config_hash(),
    )
    _write_report(report, run_dir, args.report)
    return 0


def cmd_baseline(args) -> int:
    config = _load_config(args)
    if args.data:
        config.data.root = args.data
    run_dir = _prepare_run_dir(args, f"baseline-{args.kind}-{config.config_hash()[:8]}")
    write_snapshot(config, run_dir)
    dataset = build_dataset(config, args.split)
    spec = BaselineSpec(
        kind=args.kind,
        epsilon=args.eps,
        steps=args.steps,
        step_size=args.step_size,
        random_start=args.random_start,
    )
    surrogate_model = build_surrogate_model(config, build_dataset(config, "train"))
    attack = BaselineAttack(
        spec,
        surrogate_model,
        multilabel=dataset.vocabulary.multilabel,
        num_classes=len(dataset.vocabulary),
        seed=substream_seed(config.seed, "pgd-start"),
    )
    victims = _build_victims(
        config, args.victims.split(","), args.victim_weights, dataset
    )
    report = evaluate_matrix(
        attack,
        victims,
        dataset,
        target_size=config.data.image_size,
        surrogate_name=config.surrogate.arch,
        config_hash=config.config_hash(),
    )
    _write_report(report, run_dir, args.report)
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    run_dir = _prepare_run_dir(args, f"ablate-{config.config_hash()[:8]}")
    write_snapshot(config, run_dir)
    templates = [PromptTemplate(t.strip()) for t in args.templates.split(";") if t.strip()]
    if not templates:
        raise ConfigError("no templates given")

    def run_template(template):
        import copy

        cfg = copy.deepcopy(config)
        cfg.clip.template = template.template
        sub_dir = run_dir / f"template-{abs(hash(template.template)) % 10**8:08d}"
        train_config, dataset, components = assemble_training(cfg)
        ckpt = train(train_config, dataset, components, sub_dir, cfg.config_hash())
        test_set = build_dataset(cfg, "test")
        gen = components.generator.eval()
        attack = GeneratorAttack(gen, gating=cfg.generator.saliency_gating)
        victims = _build_victims(cfg, [cfg.surrogate.arch], None, test_set)
        report = evaluate_matrix(
            attack,
            victims,
            test_set,
            target_size=cfg.data.image_size,
            surrogate_name=cfg.surrogate.arch,
            config_hash=cfg.config_hash(),
        )
        del ckpt
        return report.rows[0].hamming_perturbed, cfg.config_hash()

    rows = ablate_prompts(templates, run_template)
    out = run_dir / "prompt_ablation.csv"
    with open(out, "w") as fh:
        fh.write("template,hamming_score,config_hash\n")
        for template_str, hs, cfg_hash in rows:
            fh.write(f"\"{template_str}\",{hs!r},{cfg_hash}\n")
    logger.info("prompt ablation written to %s", out)
    return 0


def cmd_export(args) -> int:
    config = _load_config(args)
    run_dir = _prepare_run_dir(args, f"export-{config.config_hash()[:8]}")
    write_snapshot(config, run_dir)
    gen = _restore_generator(config, Path(args.checkpoint))
    dataset = build_dataset(config, args.split)
    paths = export_image_grids(
        dataset,
        gen,
        run_dir / "grids",
        gating=config.generator.saliency_gating,
        target_size=config.data.image_size,
        limit=args.limit,
    )
    logger.info("wrote %d grids under %s", len(paths), run_dir / "grids")
    return 0


def _write_report(report: EvalReport, run_dir: Path, name: str) -> None:
    json_path = run_dir / name
    report.to_json(json_path)
    report.to_csv(json_path.with_suffix(".csv"))
    for row in report.rows:
        logger.info(
            "%s -> %s [%s]: HS raw %.2f%% perturbed %.2f%% FR %.2f%% SSIM %.4f",
            row.attack, row.victim, row.status, row.hamming_raw,
            row.hamming_perturbed, row.fooling_rate, row.mean_ssim,
        )


if __name__ == "__main__":
    sys.exit(main())
