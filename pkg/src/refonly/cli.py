"""Command-line workflow: data, blueprints, pairs, training, sampling, evaluation, gradient checks."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import data as D
from .checkpoint import file_hash, load_model, save_model
from .errors import ConfigError
from .numerics import Rng

log = logging.getLogger("refonly")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _emit(resolved: dict, *paths) -> None:
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print(text)
    for p in paths:
        Path(p).parent.mkdir(parents=True, exist_ok=True)
        Path(p).write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_gen_data(a) -> int:
    cfg = _merge(_load_config(a.config).get("data", {}), {
        "identities": a.identities, "poses": a.poses, "res": a.res, "seed": a.seed,
        "first_identity": a.first_identity})
    cfg = _merge({"identities": 100, "poses": 8, "res": 32, "seed": 0, "first_identity": 0}, cfg)
    sprites = D.generate_sprites(cfg["identities"], cfg["poses"], cfg["res"], Rng(cfg["seed"]),
                                 first_identity=cfg["first_identity"])
    out = Path(a.out)
    D.save_corpus(sprites, out, {"command": "gen-data", **cfg})
    _emit({"command": "gen-data", **cfg, "out": str(out), "n_sprites": len(sprites)})
    return 0


def cmd_blueprint(a) -> int:
    image, _ = D.load_png(a.inp)
    if image.shape[0] != 3:
        raise ConfigError("blueprint input must be an RGB(A) image")
    bp = D.extract_blueprint(image, a.window, a.c)
    D.save_png(a.out, bp)
    _emit({"command": "blueprint", "in": a.inp, "window": a.window, "C": a.c, "out": a.out})
    return 0


def cmd_pairs(a) -> int:
    root = Path(a.data)
    corpus = D.load_corpus(root)
    pairs = D.mine_pairs(corpus, a.threshold, a.window, a.c, a.min_ink)
    D.write_manifest(root / "pairs.manifest", pairs, corpus, a.window, a.c)
    _emit({"command": "pairs", "data": str(root), "threshold": a.threshold, "window": a.window, "C": a.c,
           "min_ink_fraction": a.min_ink, "seed": a.seed, "n_pairs": len(pairs), "n_sprites": len(corpus)})
    return 0


def cmd_train_ae(a) -> int:
    from .autoencoder import Autoencoder
    from .trainer import train_autoencoder

    cfg = _merge({"latent_channels": 4, "steps": 3000, "batch_size": 32, "lr": 1e-3, "seed": 0,
                  "kl": False, "kl_weight": 0.0}, _merge(_load_config(a.config).get("autoencoder", {}), {
        "latent_channels": a.latent_channels, "steps": a.steps, "batch_size": a.batch_size, "lr": a.lr,
        "seed": a.seed}))
    corpus = D.load_corpus(a.data)
    images = torch.stack([s.image for s in corpus])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg["seed"])
        ae = Autoencoder(cfg["latent_channels"], kl=cfg["kl"])
    losses = train_autoencoder(ae, images, cfg["steps"], cfg["batch_size"], cfg["lr"], cfg["seed"],
                               cfg["kl_weight"])
    from .checkpoint import write_checkpoint
    write_checkpoint(a.out, dict(ae.state_dict()), {"format": "refonly-autoencoder", "version": 1,
                                                    "config": cfg, "final_loss": losses[-1]})
    _emit({"command": "train-ae", **cfg, "data": a.data, "out": a.out, "final_loss": losses[-1]})
    return 0


def _model_overrides(a) -> dict:
    return {"resolution": a.res, "base_width": a.base_width, "T": a.T,
            "latent_mode": True if a.latent_mode else None, "latent_channels": a.latent_channels}


def cmd_train(a) -> int:
    from .checkpoint import read_checkpoint
    from .data import load_pairs
    from .model import DualCondModel, ModelConfig
    from .trainer import TrainConfig, train

    file_cfg = _load_config(a.config)
    run = Path(a.out)
    state = None
    if a.resume:
        model, manifest, state = load_model(a.resume)
        train_cfg = TrainConfig.from_dict(_merge(manifest["train_config"], {}))
        mcfg = model.config
    else:
        mcfg = ModelConfig.from_dict(_merge(file_cfg.get("model", {}), _model_overrides(a)))
        model = None
    train_cfg = TrainConfig.from_dict(_merge(
        file_cfg.get("train", {}) if not a.resume else train_cfg.to_dict(), {
            "batch_size": a.batch_size, "lr_target": a.lr, "warmup_steps": a.warmup, "total_steps": a.steps,
            "seed": a.seed, "cond_dropout_p": a.cond_dropout, "checkpoint_every": a.checkpoint_every,
            "resolution": mcfg.resolution, "latent_mode": mcfg.latent_mode}))
    if model is None:
        model = DualCondModel(mcfg, seed=train_cfg.seed)
        if mcfg.latent_mode:
            if not a.ae:
                raise ConfigError("latent mode needs --ae with a trained autoencoder checkpoint")
            _, ae_tensors = read_checkpoint(a.ae)
            model.autoencoder.load_state_dict(ae_tensors)
    dataset = load_pairs(a.data)
    _emit({"command": "train", "data": a.data, "model": mcfg.to_dict(), "train": train_cfg.to_dict(),
           "resume": a.resume, "ae": a.ae}, run / "config.json")
    result = train(model, dataset, train_cfg, run, state=state)
    print(json.dumps({"final_loss": result.losses[-1] if result.losses else None,
                      "checkpoint": str(result.checkpoint), "step": result.state.step}))
    return 0


def _sample_cfg(a, file_cfg):
    from .sampler import SampleConfig
    return SampleConfig(**_merge(_merge({"steps": 20, "method": "ddim", "eta": 0.0, "guidance_scale": 1.0,
                                         "seed": 0}, file_cfg.get("sample", {})),
                                 {"steps": a.steps, "method": a.method, "eta": a.eta,
                                  "guidance_scale": a.guidance, "seed": a.seed}))


def cmd_sample(a) -> int:
    from .sampler import generate, write_sidecar

    cfg = _sample_cfg(a, _load_config(a.config))
    model, _, _ = load_model(a.checkpoint)
    prompt, _ = D.load_png(a.prompt)
    if a.blueprint:
        bp, _ = D.load_png(a.blueprint)
        bp = (bp[:1] > 0.5).float() if bp.shape[0] == 1 else D.extract_blueprint(bp)
    else:
        target, _ = D.load_png(a.target)
        bp = D.extract_blueprint(target)
    image = generate(model, prompt, bp, cfg)
    D.save_png(a.out, image)
    sidecar = write_sidecar(a.out, cfg, file_hash(a.checkpoint), prompt=a.prompt,
                            blueprint=a.blueprint or a.target, checkpoint=a.checkpoint)
    _emit({"command": "sample", **cfg.to_dict(), "out": a.out, "sidecar": str(sidecar)})
    return 0


def heldout_pairs(root, threshold: float = D.DEFAULT_THRESHOLD, per_identity: int = 1):
    """The first ``per_identity`` mined pairs of each identity in a corpus directory."""
    corpus = D.load_corpus(root)
    pairs = D.mine_pairs(corpus, threshold)
    chosen, seen = [], {}
    for p in pairs:
        ident = corpus[p.target_index].identity_id
        if seen.get(ident, 0) < per_identity:
            seen[ident] = seen.get(ident, 0) + 1
            chosen.append(p)
    return chosen


def cmd_eval(a) -> int:
    from .evaluation import control_experiment

    cfg = _sample_cfg(a, _load_config(a.config))
    model, _, _ = load_model(a.checkpoint)
    pairs = heldout_pairs(a.data)
    if a.train_data:
        train_ids = {s.identity_id for s in D.load_corpus(a.train_data)}
        test_ids = {int(Path(p).stem.split("_")[0]) for p in (Path(a.data) / "sprites").glob("*.png")}
        if train_ids & test_ids:
            raise ConfigError(f"held-out identities overlap training: {sorted(train_ids & test_ids)[:5]}")
    report = control_experiment(model, pairs, cfg, out_dir=a.out)
    summary = {k: v for k, v in report.to_dict().items() if k != "per_pair"}
    _emit({"command": "eval", "checkpoint": a.checkpoint, "checkpoint_sha256": file_hash(a.checkpoint),
           "sample": cfg.to_dict(), "report": summary}, Path(a.out) / "config.json")
    return 0


def cmd_gradcheck(a) -> int:
    from .gradcheck import TINY, model_gradient_check
    from .model import ModelConfig

    file_cfg = _load_config(a.config)
    mcfg = ModelConfig.from_dict(_merge(TINY, file_cfg.get("model", {})))
    gc = _merge({"seed": 0, "h": 1e-4, "per_tensor": 3, "tolerance": 1e-4}, file_cfg.get("gradcheck", {}))
    gc = _merge(gc, {"seed": a.seed, "per_tensor": a.per_tensor})
    errs = model_gradient_check(mcfg, gc["seed"], gc["h"], gc["per_tensor"])
    worst = max(errs.values())
    _emit({"command": "gradcheck", "model": mcfg.to_dict(), **gc, "n_tensors": len(errs),
           "max_relative_error": worst, "worst_tensor": max(errs, key=errs.get)})
    return 0 if worst < gc["tolerance"] else 2


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refonly", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a procedural sprite corpus")
    g.add_argument("--identities", type=int)
    g.add_argument("--poses", type=int)
    g.add_argument("--res", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--first-identity", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(fn=cmd_gen_data)

    b = sub.add_parser("blueprint", help="extract a line-art blueprint from an image")
    b.add_argument("--in", dest="inp", required=True)
    b.add_argument("--window", type=int, default=D.DEFAULT_WINDOW)
    b.add_argument("--c", type=float, default=D.DEFAULT_C)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_blueprint)

    pr = sub.add_parser("pairs", help="mine similar sprite pairs into pairs.manifest")
    pr.add_argument("--data", required=True)
    pr.add_argument("--threshold", type=float, default=D.DEFAULT_THRESHOLD)
    pr.add_argument("--window", type=int, default=D.DEFAULT_WINDOW)
    pr.add_argument("--c", type=float, default=D.DEFAULT_C)
    pr.add_argument("--min-ink", type=float, default=D.DEFAULT_MIN_INK)
    pr.add_argument("--seed", type=int, help="recorded only; mining is deterministic")
    pr.set_defaults(fn=cmd_pairs)

    ae = sub.add_parser("train-ae", help="pretrain the latent autoencoder")
    ae.add_argument("--data", required=True)
    ae.add_argument("--out", required=True)
    ae.add_argument("--latent-channels", type=int)
    ae.add_argument("--steps", type=int)
    ae.add_argument("--batch-size", type=int)
    ae.add_argument("--lr", type=float)
    ae.add_argument("--seed", type=int)
    ae.add_argument("--config")
    ae.set_defaults(fn=cmd_train_ae)

    t = sub.add_parser("train", help="train the dual-condition diffusion model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--ae")
    for flag, typ in (("--batch-size", int), ("--lr", float), ("--warmup", int), ("--steps", int),
                      ("--seed", int), ("--cond-dropout", float), ("--checkpoint-every", int),
                      ("--res", int), ("--base-width", int), ("--T", int), ("--latent-channels", int)):
        t.add_argument(flag, type=typ)
    t.add_argument("--latent-mode", action="store_true")
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("sample", cmd_sample, "generate an image from a prompt and a blueprint"),
                               ("eval", cmd_eval, "run the shuffled-condition control experiment")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--config")
        s.add_argument("--steps", type=int)
        s.add_argument("--method", choices=("ddpm", "ddim"))
        s.add_argument("--eta", type=float)
        s.add_argument("--guidance", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int, default=1)
        if name == "sample":
            s.add_argument("--prompt", required=True)
            grp = s.add_mutually_exclusive_group(required=True)
            grp.add_argument("--blueprint")
            grp.add_argument("--target", help="extract the blueprint from this image")
        else:
            s.add_argument("--data", required=True, help="held-out corpus directory")
            s.add_argument("--train-data", help="training corpus, to verify identities are unseen")
        s.set_defaults(fn=fn)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every parameter tensor")
    gc.add_argument("--config")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--per-tensor", type=int)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(getattr(args, "workers", 1) or 1)
    try:
        return args.fn(args)
    except Exception as e:  # runtime failure
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
