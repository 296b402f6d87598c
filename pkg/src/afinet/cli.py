"""Command-line entry point: synth | train | eval | saliency | report.

One experiment config file drives every stage; each output directory gets
a run.json carrying the config digest and tool version, and stages refuse
to mix artifacts whose digests disagree.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys

import numpy as np

from . import __version__
from .codes import hamming_match, loggabor_encode, ordinal_encode
from .config import (ConfigError, ExperimentConfig, GeneratorSettings,
                     canonical_text, config_digest, parse_kv_file)
from .iris import (Degradation, ManifestError, ManifestRecord,
                   NormalizedIris, load_manifest, load_normalized,
                   rotate_normalized, save_manifest, save_normalized,
                   synth_iris_sample)
from .metrics import (compute_roc, distance_to_similarity, make_pairs,
                      regime_angle, saliency_map, save_saliency_pgm,
                      score_pairs_deep)
from .model import (VARIANT_FLATTEN, VARIANT_VLAD, build_model,
                    collect_descriptors, kmeans_init, load_checkpoint,
                    model_digest, save_checkpoint)
from .train import (DivergenceError, TrainLog, load_train_state,
                    pretrain_extractor, save_train_state, train_full)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_run_json(path, digest, extra=None):
    payload = {"config_digest": digest, "version": __version__}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def _class_seed(master_seed: int, class_index: int) -> int:
    return int(np.random.SeedSequence(
        [0x5EED, int(master_seed), int(class_index)]).generate_state(1)[0])


# -- synth ----------------------------------------------------------------------


def _load_generator_config(path):
    kv = parse_kv_file(path)
    if any(k.startswith("dataset.synth.") for k in kv):
        cfg = ExperimentConfig.from_kv(kv)
        return cfg.generator, cfg.output_dir, cfg.digest
    gen = GeneratorSettings.from_kv(kv)
    return gen, None, config_digest(kv)


def cmd_synth(args) -> int:
    gen, out_root, digest = _load_generator_config(args.config)
    if gen is None:
        raise ConfigError("config has no synthetic dataset source")
    out_dir = args.out or (os.path.join(out_root, "dataset")
                           if out_root else None)
    if out_dir is None:
        raise UsageError("--out required when the config has no output_dir")
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        if not args.force:
            raise DataError(
                f"output directory {out_dir} is not empty (use --force)")
        shutil.rmtree(out_dir)

    tmp_dir = out_dir.rstrip("/") + ".tmp"
    if os.path.isdir(tmp_dir):
        shutil.rmtree(tmp_dir)
    os.makedirs(tmp_dir)

    deg = Degradation(rotation_range_deg=gen.rotation_range_deg,
                      dilation_range=gen.dilation_range,
                      noise_std=gen.noise_std,
                      shading_amp=gen.shading_amp)
    deg.validate()
    n_train = gen.n_train_classes
    records, meta_rows = [], []
    for label in range(gen.classes):
        split = "train" if label < n_train else "test"
        cseed = _class_seed(gen.seed, label)
        for s_idx in range(gen.samples_per_class):
            sample = synth_iris_sample(cseed, s_idx, deg)
            name = f"c{label:04d}_s{s_idx:03d}.pgm"
            save_normalized(sample, os.path.join(tmp_dir, name))
            records.append(ManifestRecord(name, label, split))
            meta_rows.append((name, label, sample.rotation_deg))
    save_manifest(records, os.path.join(tmp_dir, "manifest.csv"))
    with open(os.path.join(tmp_dir, "meta.csv"), "w", encoding="utf-8") as f:
        f.write("path,label,rotation_deg\n")
        for name, label, rot in meta_rows:
            f.write(f"{name},{label},{rot!r}\n")
    with open(os.path.join(tmp_dir, "gen.cfg"), "w", encoding="utf-8") as f:
        f.write(canonical_text(gen.to_kv()))
    _write_run_json(os.path.join(tmp_dir, "run.json"), digest,
                    {"images": len(records)})
    if os.path.isdir(out_dir):
        os.rmdir(out_dir)
    os.replace(tmp_dir, out_dir)
    print(f"synth: {len(records)} images -> {out_dir}")
    return 0


# -- dataset loading --------------------------------------------------------------


def _dataset_manifest_path(cfg: ExperimentConfig) -> str:
    if cfg.manifest_path:
        return cfg.manifest_path
    return os.path.join(cfg.output_dir, "dataset", "manifest.csv")


def _load_split(manifest, split, root):
    recs = manifest.split(split)
    if not recs:
        raise DataError(f"manifest has no {split!r} records")
    images, labels = [], []
    for rec in recs:
        path = rec.path if os.path.isabs(rec.path) \
            else os.path.join(root, rec.path)
        images.append(load_normalized(path).image)
        labels.append(rec.label)
    return np.asarray(images, dtype=np.float32)[:, None], np.asarray(labels)


def _prepare_dataset(cfg: ExperimentConfig):
    mpath = _dataset_manifest_path(cfg)
    if not os.path.exists(mpath):
        raise DataError(f"dataset manifest {mpath} not found "
                        "(run `afinet synth` first?)")
    manifest = load_manifest(mpath)
    root = os.path.dirname(mpath)
    mean, std = manifest.compute_intensity_stats(
        loader=lambda p: load_normalized(
            p if os.path.isabs(p) else os.path.join(root, p)))
    with open(mpath, "rb") as f:
        import hashlib
        data_digest = hashlib.sha256(f.read()).hexdigest()[:16]
    return manifest, root, mean, std, data_digest


def _train_val_split(labels, val_fraction, seed):
    rng = np.random.default_rng(np.random.SeedSequence([0x5711, int(seed)]))
    val_mask = np.zeros(len(labels), dtype=bool)
    for lab in np.unique(labels):
        idx = np.nonzero(labels == lab)[0]
        if len(idx) < 2:
            continue
        n_val = min(max(1, int(round(val_fraction * len(idx)))),
                    len(idx) - 1)
        chosen = rng.permutation(idx)[:n_val]
        val_mask[chosen] = True
    if not val_mask.any():
        raise DataError("validation split is empty; need >= 2 samples in "
                        "some class")
    return ~val_mask, val_mask


# -- train ----------------------------------------------------------------------


def _train_dir(cfg, variant):
    suffix = "train" if variant == VARIANT_VLAD else "train-no-vlad"
    return os.path.join(cfg.output_dir, suffix)


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    variant = VARIANT_FLATTEN if args.ablation == "no-vlad" else VARIANT_VLAD
    out_dir = _train_dir(cfg, variant)
    run_path = os.path.join(out_dir, "run.json")
    state_path = os.path.join(out_dir, "state.npz")
    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    log_path = os.path.join(out_dir, "log.jsonl")

    manifest, root, mean, std, data_digest = _prepare_dataset(cfg)
    images, labels = _load_split(manifest, "train", root)
    images = (images - mean) / std

    tr_mask, val_mask = _train_val_split(labels, cfg.val_fraction, cfg.seed)
    x_tr, y_tr = images[tr_mask], labels[tr_mask]
    x_val, y_val = images[val_mask], labels[val_mask]
    num_classes = int(labels.max()) + 1

    resume_state = None
    if args.resume:
        if not os.path.exists(run_path):
            raise DataError(f"nothing to resume in {out_dir}")
        with open(run_path, encoding="utf-8") as f:
            run = json.load(f)
        if run["config_digest"] != cfg.digest:
            raise DataError(
                f"config digest {cfg.digest} does not match the run's "
                f"{run['config_digest']}; refusing to resume")
        if os.path.exists(state_path) and os.path.exists(last_path):
            model = load_checkpoint(last_path)
            resume_state = load_train_state(state_path, model)
        else:
            args.resume = False

    if not args.resume or resume_state is None:
        os.makedirs(out_dir, exist_ok=True)
        _write_run_json(run_path, cfg.digest, {
            "variant": variant, "mean": mean, "std": std,
            "dataset_digest": data_digest, "num_classes": num_classes})
        model = build_model(num_classes, seed=cfg.seed, variant=variant)
        model.dataset_digest = data_digest
        print(f"pretraining extractor ({variant})...")
        pre_log = pretrain_extractor(model, x_tr, y_tr, x_val, y_val,
                                     cfg.train, num_classes)
        with open(os.path.join(out_dir, "pretrain_log.jsonl"), "w",
                  encoding="utf-8") as f:
            f.write(pre_log.to_jsonl())
        if variant == VARIANT_VLAD:
            print("k-means VLAD initialization...")
            desc = collect_descriptors(model, x_tr,
                                       batch=cfg.train.batch_size)
            rng = np.random.default_rng(
                np.random.SeedSequence([0xDE5C, cfg.seed]))
            if len(desc) > cfg.kmeans_sample:
                keep = rng.choice(len(desc), size=cfg.kmeans_sample,
                                  replace=False)
                desc = desc[keep]
            model.vlad = kmeans_init(desc, alpha=cfg.alpha, seed=cfg.seed)

    def on_epoch(epoch, m, state, log):
        save_checkpoint(m, last_path)
        save_train_state(state, m, state_path)
        with open(log_path, "w", encoding="utf-8") as f:
            f.write(log.to_jsonl())
        rec = log.records[-1]
        print(f"epoch {rec.epoch}: loss {rec.train_loss:.4f} "
              f"acc {rec.train_acc:.3f} val_err {rec.val_error:.3f}")

    model, log, state = train_full(model, x_tr, y_tr, x_val, y_val,
                                   cfg.train, resume_state=resume_state,
                                   on_epoch=on_epoch)
    save_checkpoint(model, best_path)
    with open(log_path, "w", encoding="utf-8") as f:
        f.write(log.to_jsonl())
    print(f"train: best val error "
          f"{min(r.val_error for r in log.records):.3f} -> {best_path}")
    return 0


# -- eval -----------------------------------------------------------------------


def _encode_codes(encoder, images, mean, std):
    # baseline encoders read raw (unnormalized) pixel grids
    out = []
    for img in images:
        out.append(encoder(NormalizedIris(
            img[0], np.ones_like(img[0], dtype=bool))))
    return out


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    ckpt = args.checkpoint or os.path.join(_train_dir(cfg, VARIANT_VLAD),
                                           "best.ckpt")
    if not os.path.exists(ckpt):
        raise DataError(f"checkpoint {ckpt} not found")
    model = load_checkpoint(ckpt)
    method = "afinet" if model.variant == VARIANT_VLAD else "afinet-novlad"

    manifest, root, mean, std, data_digest = _prepare_dataset(cfg)
    raw_images, labels = _load_split(manifest, "test", root)
    images = (raw_images - mean) / std

    out_dir = args.out or os.path.join(cfg.output_dir, f"eval-{method}")
    os.makedirs(out_dir, exist_ok=True)
    _write_run_json(os.path.join(out_dir, "run.json"), cfg.digest,
                    {"checkpoint": os.path.abspath(ckpt),
                     "model_digest": model_digest(model)})

    encoders = {"loggabor": loggabor_encode, "ordinal": ordinal_encode}
    rows = []
    for regime in cfg.regimes:
        pairs = make_pairs(labels, regime, cfg.genuine_pairs,
                           cfg.impostor_pairs, seed=cfg.seed)
        gen, imp = score_pairs_deep(model, images, pairs,
                                    batch=cfg.train.batch_size)
        rows.append(_emit_report(out_dir, method, regime, gen, imp, cfg,
                                 model_digest(model), pairs))
        angle = regime_angle(regime)
        for bname in cfg.baselines:
            enc = encoders[bname]
            codes_a = _encode_codes(enc, raw_images, mean, std)
            rotated = np.roll(raw_images,
                              int(np.round(angle / 360.0 * 128)), axis=-1) \
                if angle else raw_images
            codes_b = _encode_codes(enc, rotated, mean, std)
            hd_gen = [hamming_match(codes_a[p.a], codes_b[p.b],
                                    cfg.shift_range)[0]
                      for p in pairs.genuine]
            hd_imp = [hamming_match(codes_a[p.a], codes_b[p.b],
                                    cfg.shift_range)[0]
                      for p in pairs.impostor]
            rows.append(_emit_report(
                out_dir, bname, regime, distance_to_similarity(hd_gen),
                distance_to_similarity(hd_imp), cfg, "-", pairs))
    _write_summary(os.path.join(out_dir, "summary.csv"), rows, cfg)
    print(f"eval: {len(rows)} reports -> {out_dir}")
    return 0


def _emit_report(out_dir, method, regime, gen, imp, cfg, mdigest, pairs):
    rep = compute_roc(gen, imp, far_levels=cfg.far_levels)
    rep.metadata = {
        "method": method, "regime": regime,
        "config_digest": cfg.digest, "version": __version__,
        "model_digest": mdigest,
        "n_genuine": len(pairs.genuine), "n_impostor": len(pairs.impostor),
        "shift_range": cfg.shift_range,
    }
    base = os.path.join(out_dir, f"{method}_{regime}")
    with open(base + ".report.json", "w", encoding="utf-8") as f:
        f.write(rep.to_json() + "\n")
    with open(base + ".roc.csv", "w", encoding="utf-8") as f:
        f.write(rep.roc_csv())
    return rep.metadata | {"eer": rep.eer,
                           **{f"frr@{lvl:g}": rep.frr_at_far[lvl]
                              for lvl in cfg.far_levels}}


def _summary_columns(cfg):
    return (["method", "regime", "eer"]
            + [f"frr@{lvl:g}" for lvl in cfg.far_levels]
            + ["n_genuine", "n_impostor", "config_digest", "version"])


def _write_summary(path, rows, cfg):
    cols = _summary_columns(cfg)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in sorted(rows, key=lambda r: (r["method"], r["regime"])):
            f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")


# -- saliency --------------------------------------------------------------------


def cmd_saliency(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint {args.checkpoint} not found")
    model = load_checkpoint(args.checkpoint)
    if not os.path.exists(args.image):
        raise DataError(f"image {args.image} not found")
    img = load_normalized(args.image)
    if not 0 <= args.class_index < model.num_classes:
        raise DataError(f"class index {args.class_index} out of range "
                        f"[0, {model.num_classes})")
    _, _, mean, std, _ = _prepare_dataset(cfg)
    out_dir = args.out or os.path.join(cfg.output_dir, "saliency")
    os.makedirs(out_dir, exist_ok=True)
    angles = [float(a) for a in args.angles.split(",") if a.strip()]
    for angle in angles:
        rotated = rotate_normalized(img, angle)
        norm = (rotated.image - mean) / std
        sal = saliency_map(model, norm.astype(np.float32), args.class_index)
        save_saliency_pgm(sal, os.path.join(
            out_dir, f"saliency_a{angle:g}.pgm"))
    _write_run_json(os.path.join(out_dir, "run.json"), cfg.digest,
                    {"image": os.path.abspath(args.image),
                     "class_index": args.class_index, "angles": angles,
                     "model_digest": model_digest(model)})
    print(f"saliency: {len(angles)} maps -> {out_dir}")
    return 0


# -- report ----------------------------------------------------------------------


def cmd_report(args) -> int:
    found = []
    for dirpath, _, files in os.walk(args.dir):
        for name in sorted(files):
            if name.endswith(".report.json"):
                found.append(os.path.join(dirpath, name))
    if not found:
        raise DataError(f"no .report.json files under {args.dir}")
    entries = []
    digests = set()
    for path in found:
        with open(path, encoding="utf-8") as f:
            payload = json.loads(f.read())
        md = payload["metadata"]
        digests.add(md.get("config_digest", "?"))
        from .metrics import EvalReport
        rep = EvalReport.from_json(json.dumps(payload))
        entries.append({
            "method": md["method"], "regime": md["regime"],
            "eer": rep.eer,
            **{f"frr@{float(k):g}": v for k, v in rep.frr_at_far.items()},
            "n_genuine": md["n_genuine"], "n_impostor": md["n_impostor"],
            "config_digest": md["config_digest"],
            "version": md.get("version", "?"),
        })
    if len(digests) > 1:
        raise DataError(
            f"refusing to merge reports from different configs: "
            f"{sorted(digests)}")
    entries.sort(key=lambda e: (e["method"], e["regime"]))
    cols = list(dict.fromkeys(k for e in entries for k in e))
    with open(args.out + ".csv", "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for e in entries:
            f.write(",".join(str(e.get(c, "")) for c in cols) + "\n")
    with open(args.out + ".json", "w", encoding="utf-8") as f:
        json.dump({"version": __version__, "entries": entries}, f,
                  sort_keys=True, indent=1)
        f.write("\n")
    print(f"report: {len(entries)} entries -> {args.out}.csv")
    return 0


# -- entry point ------------------------------------------------------------------


def _build_parser() -> _Parser:
    p = _Parser(prog="afinet", description=__doc__)
    p.add_argument("--version", action="version",
                   version=f"afinet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic iris dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="dataset directory (default: "
                                  "<output_dir>/dataset)")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="pretrain, k-means init, full training")
    tp.add_argument("--config", required=True)
    tp.add_argument("--resume", action="store_true")
    tp.add_argument("--ablation", choices=["no-vlad"], default=None)
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="verification metrics across regimes")
    ep.add_argument("--config", required=True)
    ep.add_argument("--checkpoint")
    ep.add_argument("--out")
    ep.set_defaults(fn=cmd_eval)

    ap = sub.add_parser("saliency", help="input-gradient saliency maps")
    ap.add_argument("--config", required=True)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--image", required=True)
    ap.add_argument("--class-index", type=int, required=True)
    ap.add_argument("--angles", default="0")
    ap.add_argument("--out")
    ap.set_defaults(fn=cmd_saliency)

    rp = sub.add_parser("report", help="consolidate evaluation reports")
    rp.add_argument("--dir", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, ManifestError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        if e.dump:
            dump_path = "afinet_divergence_dump.json"
            with open(dump_path, "w", encoding="utf-8") as f:
                json.dump(e.dump, f, indent=1)
            print(f"state dump written to {dump_path}", file=sys.stderr)
        return 3
    except Exception as e:  # checkpoint errors carry their own message
        from .model import CheckpointError
        if isinstance(e, CheckpointError):
            print(f"data error: {e}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
