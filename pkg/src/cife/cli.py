"""``cife`` command line.

Exit codes: 0 success, 1 a gate failed (or training diverged), 2 usage or
input error (bad flags, refused configuration, missing or corrupt files).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path


from . import checkpoint, store
from .character_encoder import VariantKind
from .config import ConfigError, RunConfig, env_seed, load_config
from .dataset import (
    IDENTITY_SPACE,
    build_dataset,
    load_dataset,
    manifest_hash,
    pair_count,
    write_dataset,
)
from .evaluation import EvaluationError, eval_control, eval_identity, eval_transfer, generate
from .imageio import contact_sheet, load_png, save_png
from .training import (
    FreezeViolation,
    TrainingDiverged,
    ae_pretrain_config,
    backbone_config,
    encoder_config,
    finetune_autoencoder_stage2,
    pretrain_autoencoder,
    train_backbone_diffusion,
    train_character_encoder,
    train_vae,
    vae_config,
    write_loss_tsv,
)

log = logging.getLogger("cife")

PASS, GATE_FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _seed(args, fallback: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = env_seed()
    return fallback if env is None else env


# -- gen-data ------------------------------------------------------------------

def _excluded_ids(items) -> list[str]:
    ids = []
    for item in items or ():
        path = Path(item)
        if (path / "manifest.json").exists():
            manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
            ids.extend(c["id"] for c in manifest["characters"])
        else:
            ids.append(item)
    return ids


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty (pass --force to overwrite)")
        shutil.rmtree(out)
    if args.characters > IDENTITY_SPACE:
        raise UsageError(f"--characters {args.characters} exceeds the identity space ({IDENTITY_SPACE})")
    seed = _seed(args, 1)
    exclude = _excluded_ids(args.exclude)
    records = build_dataset(args.characters, args.c_per, args.f_per, seed=seed, exclude=exclude)
    params = {"characters": args.characters, "c_per": args.c_per, "f_per": args.f_per, "seed": seed}
    if exclude:
        params["exclude"] = sorted(exclude)
    digest = write_dataset(records, out, params)
    print(f"pairs {pair_count(records)}")
    print(f"manifest {digest}")
    return PASS


# -- training ------------------------------------------------------------------

def _train_config(args, factory, **fixed):
    base = RunConfig(train=factory(**fixed))
    overrides = {"total_steps": args.steps, "learning_rate": args.lr, "batch_size": args.batch_size,
                 "seed": args.seed}
    cfg = load_config(args.config, base=base, overrides=overrides)
    for key, value in fixed.items():
        if cfg.get(key) != value:
            raise UsageError(f"{key} is fixed to {value!r} for this command")
    return cfg


def _load_data(path) -> tuple[list, str]:
    if path is None:
        raise UsageError("--data is required")
    try:
        records = load_dataset(path)
    except FileNotFoundError as e:
        raise store.MissingPrerequisite(str(e)) from None
    return records, manifest_hash(path)


def _finish_run(out: Path, cfg: RunConfig, losses, inputs: dict, outputs: dict) -> None:
    cfg.write(out / "config.txt")
    write_loss_tsv(out / "loss.tsv", losses)
    _dump(out / "run.json", {"inputs": inputs, "outputs": outputs})


def cmd_train_vae(args) -> int:
    records, mhash = _load_data(args.data)
    cfg = _train_config(args, vae_config)
    out = Path(args.out)
    result = train_vae(records, cfg.train)
    meta = {"config": cfg.train.as_dict(), "dataset": mhash}
    digest = store.save_component(out / "vae.cife", result.params, "vae", meta)
    _finish_run(out, cfg, result.losses, {"dataset": mhash}, {"vae.cife": digest})
    print(f"vae {digest}")
    return PASS


def cmd_train_backbone(args) -> int:
    records, mhash = _load_data(args.data)
    if args.vae is None:
        raise UsageError("--vae is required (produce it with `cife train-vae`)")
    vae = store.load_component(args.vae, "vae", "train-vae")
    init = None
    if args.init:
        bb = store.load_backbone(args.init, need=("text", "unet"))
        init = (bb["text"], bb["unet"])
    cfg = _train_config(args, backbone_config)
    result = train_backbone_diffusion(records, vae, cfg.train, init=init)
    out = Path(args.out)
    backbone = {"vae": vae,
                "text": {k: v for k, v in result.params.items() if k.startswith("text.")},
                "unet": {k: v for k, v in result.params.items() if k.startswith("unet.")}}
    meta = {"config": cfg.train.as_dict(), "dataset": mhash}
    digests = store.save_backbone(out, backbone, meta)
    inputs = {"dataset": mhash, "vae": checkpoint.file_hash(args.vae)}
    if args.init:
        inputs["init"] = store.backbone_hash(args.init)
    _finish_run(out, cfg, result.losses, inputs, digests)
    print(f"backbone {store.backbone_hash(out)}")
    return PASS


def _print_freeze(result) -> None:
    for comp in sorted(result.frozen_hashes_before):
        before, after = result.frozen_hashes_before[comp], result.frozen_hashes_after[comp]
        print(f"{comp} hash before {before}")
        print(f"{comp} hash after  {after}  {'identical' if before == after else 'CHANGED'}")


def _encoder_meta(cfg: RunConfig, mhash: str, records, backbone_dir, **extra) -> dict:
    return {"config": cfg.train.as_dict(), "dataset": mhash, "train_ids": [r.char_id for r in records],
            "backbone": store.backbone_hash(backbone_dir), **extra}


def cmd_train_encoder(args) -> int:
    variant = VariantKind.parse(args.variant)
    if variant is VariantKind.AUTOENCODER:
        if not args.init:
            raise store.MissingPrerequisite(
                "the autoencoder variant starts from a stage-1 checkpoint: run `cife pretrain-ae` "
                "and pass it with --init")
        return _finetune_ae(args, unfreeze_unet=False)
    records, mhash = _load_data(args.data)
    backbone = store.load_backbone(args.backbone)
    cfg = _train_config(args, encoder_config, variant=variant.value)
    init = store.load_encoder(args.init) if args.init else None
    result = train_character_encoder(records, backbone, cfg.train, init=init)
    _print_freeze(result)
    out = Path(args.out)
    digest = store.save_encoder(out / "encoder.cife", result.params,
                                _encoder_meta(cfg, mhash, records, args.backbone))
    _finish_run(out, cfg, result.losses, {"dataset": mhash, "backbone": store.backbone_hash(args.backbone)},
                {"encoder.cife": digest, "frozen_before": result.frozen_hashes_before,
                 "frozen_after": result.frozen_hashes_after})
    print(f"encoder {digest}")
    return PASS


def cmd_pretrain_ae(args) -> int:
    records, mhash = _load_data(args.data)
    text = store.load_backbone(args.backbone, need=("text",))["text"]
    cfg = _train_config(args, ae_pretrain_config, variant="autoencoder")
    result = pretrain_autoencoder(records, text, cfg.train)
    out = Path(args.out)
    meta = _encoder_meta(cfg, mhash, records, args.backbone, stage=1)
    digest = store.save_encoder(out / "encoder.cife", result.params, meta)
    _finish_run(out, cfg, result.losses, {"dataset": mhash, "backbone": store.backbone_hash(args.backbone)},
                {"encoder.cife": digest})
    print(f"encoder {digest}")
    return PASS


def _finetune_ae(args, unfreeze_unet: bool) -> int:
    records, mhash = _load_data(args.data)
    backbone = store.load_backbone(args.backbone)
    stage1_path = args.init
    stage1 = store.load_encoder(stage1_path)
    fixed = {"variant": "autoencoder"}
    if unfreeze_unet:
        fixed["freeze_unet"] = False
    cfg = _train_config(args, encoder_config, **fixed)
    result = finetune_autoencoder_stage2(records, backbone, stage1, cfg.train)
    _print_freeze(result)
    out = Path(args.out)
    meta = _encoder_meta(cfg, mhash, records, args.backbone, stage=2)
    outputs = {"encoder.cife": store.save_encoder(out / "encoder.cife", result.params, meta)}
    if unfreeze_unet:
        tuned = {"vae": backbone["vae"], "text": backbone["text"], "unet": result.tuned_unet}
        outputs["backbone"] = store.save_backbone(out / "backbone", tuned, {"config": cfg.train.as_dict()})
    _finish_run(out, cfg, result.losses, {"dataset": mhash, "backbone": store.backbone_hash(args.backbone),
                                          "stage1": checkpoint.file_hash(stage1_path)}, outputs)
    print(f"encoder {outputs['encoder.cife']}")
    return PASS


def cmd_finetune_ae(args) -> int:
    if not args.init:
        raise store.MissingPrerequisite("--init STAGE1 is required; produce it with `cife pretrain-ae`")
    return _finetune_ae(args, unfreeze_unet=args.unfreeze_unet)


# -- sampling ------------------------------------------------------------------

def cmd_sample(args) -> int:
    if (args.encoder is None) != (args.ref is None):
        raise UsageError("--encoder and --ref must be given together")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    backbone = store.load_backbone(args.backbone)
    enc = ref = None
    if args.encoder:
        enc = store.load_encoder(args.encoder)
        if not Path(args.ref).exists():
            raise UsageError(f"reference image {args.ref} not found")
        ref = load_png(args.ref)
        if ref.shape != (3, 32, 32):
            raise UsageError(f"reference must be a 32x32 RGB image, got {ref.shape}")
    seed = _seed(args)
    seeds = [seed + i for i in range(args.count)]
    images = generate(backbone, [args.prompt] * args.count, seeds, args.steps, enc, ref, eta=args.eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, im in enumerate(images):
        path = out / f"sample_{i:03d}.png"
        save_png(im, path)
        files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    sidecar = {"prompt": args.prompt, "seed": seed, "steps": args.steps, "count": args.count, "eta": args.eta,
               "sampler": "ddim", "backbone": store.backbone_hash(args.backbone),
               "encoder": checkpoint.file_hash(args.encoder) if args.encoder else None,
               "ref": hashlib.sha256(Path(args.ref).read_bytes()).hexdigest() if args.ref else None,
               "files": files}
    _dump(out / "sample.json", sidecar)
    print(f"wrote {args.count} images to {out}")
    return PASS


# -- evaluation ----------------------------------------------------------------

def _encoder_train_ids(path) -> list[str]:
    _, _, meta = checkpoint.load(path)
    return list(meta.get("train_ids", []))


def _write_sheets(out: Path, images: dict) -> None:
    for char_id, imgs in images.items():
        save_png(contact_sheet(list(imgs[:64])), out / f"{char_id}.png")


def _report_line(name, rep) -> str:
    return f"{name}: accuracy {rep['accuracy']:.4f} ({rep['total_correct']}/{rep['total_samples']}) p={rep['p_value']:.3g}"


def cmd_eval(args) -> int:
    held, held_hash = _load_data(args.heldout)
    seed = _seed(args)
    out = Path(args.out)
    if args.kind == "identity":
        enc = store.load_encoder(args.encoder)
        backbone = store.load_backbone(args.backbone)
        rep, imgs = eval_identity(enc, backbone, held, args.samples, seed, args.steps,
                                  _encoder_train_ids(args.encoder), return_images=True)
        report = {**rep.to_dict(), "heldout": held_hash, "backbone": store.backbone_hash(args.backbone),
                  "encoder": checkpoint.file_hash(args.encoder)}
        passed = rep.p_value < args.alpha
        print(_report_line("identity", report))
    elif args.kind == "control":
        backbone = store.load_backbone(args.backbone)
        rep, imgs = eval_control(backbone, held, args.samples, seed, args.steps, return_images=True)
        report = {**rep.to_dict(), "heldout": held_hash, "backbone": store.backbone_hash(args.backbone)}
        passed = rep.p_value > args.alpha
        print(_report_line("control", report))
    else:
        hash_a, hash_b = store.backbone_hash(args.backbone_a), store.backbone_hash(args.backbone_b)
        if hash_a == hash_b:
            raise UsageError("transfer test needs two different backbones (hashes are identical)")
        enc = store.load_encoder(args.encoder)
        report = eval_transfer(enc, store.load_backbone(args.backbone_a), store.load_backbone(args.backbone_b),
                               held, args.samples, seed, hash_a, hash_b, args.steps,
                               _encoder_train_ids(args.encoder))
        report["heldout"] = held_hash
        imgs = {}
        passed = report["backbone_a"]["p_value"] < args.alpha and report["backbone_b"]["p_value"] < args.alpha_b
        print(_report_line("backbone A", report["backbone_a"]))
        print(_report_line("backbone B", report["backbone_b"]))
    report["gate_passed"] = bool(passed)
    _dump(out / "eval.json", report)
    _write_sheets(out, imgs)
    print("PASS" if passed else "FAIL")
    return PASS if passed else GATE_FAILED


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite
    results = run_suite(include_end_to_end=not args.ops_only)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print("PASS" if ok else "FAIL")
    return PASS if ok else GATE_FAILED


# -- parser --------------------------------------------------------------------

def _training_flags(p) -> None:
    p.add_argument("--data", help="dataset directory from `cife gen-data`")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cife", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a sprite dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--characters", type=int, default=8)
    p.add_argument("--c-per", type=int, default=2)
    p.add_argument("--f-per", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--exclude", nargs="*", default=[], help="character ids or dataset directories to skip")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the image autoencoder")
    _training_flags(p)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-backbone", help="train text encoder + UNet on a frozen VAE")
    _training_flags(p)
    p.add_argument("--vae", help="vae.cife from `cife train-vae`")
    p.add_argument("--init", help="backbone directory to continue from")
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train-encoder", help="train a character encoder on a frozen backbone")
    _training_flags(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--variant", default="same-place", choices=[v.value for v in VariantKind])
    p.add_argument("--init", help="encoder checkpoint to start from (stage 1 for autoencoder)")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("pretrain-ae", help="autoencoder stage 1 (reconstruction)")
    _training_flags(p)
    p.add_argument("--backbone", required=True, help="backbone whose text encoder conditions the decoder")
    p.set_defaults(func=cmd_pretrain_ae)

    p = sub.add_parser("finetune-ae", help="autoencoder stage 2 (diffusion objective)")
    _training_flags(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--init", help="stage-1 checkpoint from `cife pretrain-ae`")
    p.add_argument("--unfreeze-unet", action="store_true", help="also fine-tune the UNet (non-default)")
    p.set_defaults(func=cmd_finetune_ae)

    p = sub.add_parser("sample", help="DDIM sampling, optionally character-conditioned")
    p.add_argument("--backbone", required=True)
    p.add_argument("--encoder")
    p.add_argument("--ref")
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="identity / control / transfer experiments")
    p.add_argument("kind", choices=["identity", "control", "transfer"])
    p.add_argument("--heldout", required=True, help="dataset directory of held-out characters")
    p.add_argument("--encoder")
    p.add_argument("--backbone")
    p.add_argument("--backbone-a")
    p.add_argument("--backbone-b")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--alpha-b", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every op")
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end encoder+UNet checks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


_REQUIRED = {
    "identity": ("encoder", "backbone"),
    "control": ("backbone",),
    "transfer": ("encoder", "backbone_a", "backbone_b"),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits on bad flags and --help; hand the code back instead
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "eval":
        missing = [f"--{n.replace('_', '-')}" for n in _REQUIRED[args.kind] if getattr(args, n) is None]
        if missing:
            print(f"error: eval {args.kind} needs {' '.join(missing)}", file=sys.stderr)
            return USAGE
        if args.alpha is None:
            args.alpha = 0.05 if args.kind == "control" else 0.01
    try:
        return args.func(args)
    except (UsageError, ConfigError, EvaluationError, FreezeViolation, store.MissingPrerequisite,
            checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return GATE_FAILED


if __name__ == "__main__":
    sys.exit(main())
