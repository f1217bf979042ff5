"""Stage orchestration over a content-addressed run directory.

Every stage reads its inputs from ``runs/<run-id>/`` and writes artifacts back
there.  Artifacts are registered with a sha256 so downstream stages can tell a
missing or stale input apart from a valid one.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import evalmetrics as em
from .config import ABLATIONS, ExperimentConfig
from .explain import lime_attribute, render_overlay, topk_overlap
from .fairness import FairnessTable, SubgroupSpec, fairness_report
from .heads import (ACUITY_ORDER, HeadHParams, TrainedHead, embedding_checksum, priority_score,
                    train_acuity_head, train_age_head, train_diagnosis_head, train_referral_head)
from .hvit import (FlatEncoder, HierarchicalEncoder, SequenceEncoderConfig, StudyEncoderConfig,
                   read_checkpoint, save_checkpoint)
from .objectives import (AugmentationPolicy, ClipHParams, ClipModel, SeqView, StudyExample, StudyView,
                         steps_to_target, train_clip)
from .synthcohort import (ACUITY_LEVELS, CohortConfig, MappingTable, VolumetricStudy, acuity_referral_map,
                          generate_cohort, load_cohort, read_manifest, save_cohort, split_indices)
from .textenc import (UNK_NAME, LMConfig, LMHParams, NameEncoder, NamePretrainHParams, ReportEncoder,
                      WordVocab, pretrain_name_encoder, pretrain_report_lm, summarize)
from .voltok import (PatchSpec, TokenizerHParams, collect_patches, load_tokenizer, save_tokenizer,
                     tokenize_and_cache, train_tokenizer)

log = logging.getLogger(__name__)

STAGES = ("generate", "train-tokenizer", "tokenize", "pretrain-text", "train-clip", "probe",
          "evaluate", "explain", "fairness", "scale-sweep", "ablate")

# artifact name -> producing stage
PRODUCER = {
    "cohort": "generate",
    "tokenizer": "train-tokenizer",
    "tokens": "tokenize",
    "text": "pretrain-text",
    "clip": "train-clip",
    "heads": "probe",
}


class MissingArtifact(FileNotFoundError):
    def __init__(self, name: str, reason: str = "not found"):
        stage = PRODUCER[name]
        super().__init__(f"{name} artifact {reason}; run `hvlm --stage {stage}` first")
        self.artifact, self.stage = name, stage


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return None if np.isnan(v) else v
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def emit(event: str, **fields) -> None:
    """One machine-parsable JSON log line."""
    log.info(json.dumps({"event": event, **_jsonable(fields)}, sort_keys=True))


# ---------------------------------------------------------------------- run dir


@dataclass
class RunDir:
    root: Path
    config: ExperimentConfig

    SUBDIRS = ("config", "checkpoints", "caches", "metrics", "plots")

    @classmethod
    def open(cls, config: ExperimentConfig, runs_root: str | Path = "runs",
             run_dir: str | Path | None = None) -> "RunDir":
        root = Path(run_dir) if run_dir is not None else Path(runs_root) / config.digest()[:12]
        for d in cls.SUBDIRS:
            (root / d).mkdir(parents=True, exist_ok=True)
        cfg_path = root / "config" / "config.json"
        if cfg_path.exists():
            old = json.loads(cfg_path.read_text())
            if old != json.loads(json.dumps(config.to_dict())):
                raise ValueError(f"{root} holds a run with a different config; choose another --run-dir")
        else:
            cfg_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return cls(root, config)

    # paths
    @property
    def cohort_dir(self) -> Path:
        return self.root / "caches" / "cohort"

    @property
    def token_dir(self) -> Path:
        return self.root / "caches" / "tokens"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    # artifact registry
    @property
    def _registry_path(self) -> Path:
        return self.root / "checkpoints" / "artifacts.json"

    def _registry(self) -> dict:
        p = self._registry_path
        return json.loads(p.read_text()) if p.exists() else {}

    def register(self, name: str, path: Path) -> str:
        reg = self._registry()
        digest = _sha256_file(path)
        reg[name] = {"path": str(path.relative_to(self.root)), "sha256": digest}
        self._registry_path.write_text(json.dumps(reg, indent=2, sort_keys=True))
        return digest

    def require(self, name: str) -> Path:
        entry = self._registry().get(name)
        if entry is None:
            raise MissingArtifact(name)
        path = self.root / entry["path"]
        if not path.exists():
            raise MissingArtifact(name, f"file {path} is missing")
        if _sha256_file(path) != entry["sha256"]:
            raise MissingArtifact(name, "checksum does not match its registration")
        return path

    def digest(self, name: str) -> str:
        self.require(name)
        return self._registry()[name]["sha256"]

    def has(self, name: str) -> bool:
        try:
            self.require(name)
            return True
        except MissingArtifact:
            return False

    # metrics
    def write_metrics(self, name: str, obj: dict) -> Path:
        path = self.root / "metrics" / f"{name}.json"
        path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
        return path

    def read_metrics(self, name: str) -> dict:
        return json.loads((self.root / "metrics" / f"{name}.json").read_text())

    def metrics_bundle(self) -> dict:
        return {p.stem: json.loads(p.read_text()) for p in sorted((self.root / "metrics").glob("*.json"))}


# ---------------------------------------------------------------------- builders


def cohort_config(cfg: ExperimentConfig) -> CohortConfig:
    c = cfg.cohort
    return CohortConfig(n_studies=c.n_studies, grid=tuple(c.grid), noise_sd=c.noise_sd,
                        lesion_gain=c.lesion_gain, lesion_scale=c.lesion_scale)


def patch_spec(cfg: ExperimentConfig) -> PatchSpec:
    t = cfg.tokenizer
    return PatchSpec(tuple(t.patch_dims), tuple(t.downsample), t.latent_channels)


def splits(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    return split_indices(cfg.cohort.n_studies, cfg.seed, tuple(cfg.cohort.split))


def encoder_configs(cfg: ExperimentConfig) -> tuple[SequenceEncoderConfig, StudyEncoderConfig]:
    e = cfg.encoder
    seq = SequenceEncoderConfig(layers=e.seq_layers, heads=e.seq_heads, head_dim=e.seq_head_dim,
                                n_registers=e.seq_registers, output_dim=e.seq_output_dim,
                                latent_dim=patch_spec(cfg).latent_dim, pos_dim_per_axis=e.pos_dim_per_axis,
                                name_dim=cfg.text.name_dim, pos_base=e.pos_base, readout=e.readout)
    st = StudyEncoderConfig(layers=e.study_layers, heads=e.study_heads, head_dim=e.study_head_dim,
                            n_registers=e.study_registers, output_dim=e.study_output_dim,
                            name_dim=cfg.text.name_dim, use_study_name=not cfg.ablation.no_study_name)
    return seq, st


def clip_hparams(cfg: ExperimentConfig, steps: int | None = None, seed: int | None = None,
                 target_top1: float | None = None) -> ClipHParams:
    o = cfg.objective
    a = o.augment
    aug = AugmentationPolicy(a.shuffle_items, a.token_drop, a.name_unk, a.threshold_jitter, a.seq_drop)
    return ClipHParams(steps=steps or o.steps, batch_size=o.batch_size, lr=o.lr, temperature_lr=o.temperature_lr,
                       weight_decay=o.weight_decay, lam=0.0 if cfg.ablation.no_patdis else o.lam,
                       self_mode=o.self_mode, abnormal_upsample=o.abnormal_upsample, augment=aug,
                       eval_every=o.eval_every, target_top1=target_top1,
                       seed=cfg.seed if seed is None else seed)


@dataclass
class TextArtifacts:
    lm: ReportEncoder
    name_encoder: NameEncoder
    history: dict


def save_text(path: Path, text: TextArtifacts) -> None:
    torch.save({"vocab": text.lm.vocab.words, "lm_cfg": asdict(text.lm.cfg), "lm": text.lm.state_dict(),
                "name_dim": text.name_encoder.out_dim, "name": text.name_encoder.state_dict(),
                "history": text.history}, path)


def load_text(path: Path) -> TextArtifacts:
    blob = torch.load(path, weights_only=False)
    lm = ReportEncoder(WordVocab(blob["vocab"]), LMConfig(**blob["lm_cfg"]))
    lm.load_state_dict(blob["lm"])
    ne = NameEncoder(blob["name_dim"])
    ne.load_state_dict(blob["name"])
    return TextArtifacts(lm, ne, blob["history"])


def build_model(cfg: ExperimentConfig, text: TextArtifacts) -> ClipModel:
    """Fresh CLIP model with encoder weights drawn from ``cfg.seed``."""
    torch.manual_seed(cfg.seed)
    seq_cfg, st_cfg = encoder_configs(cfg)
    if cfg.ablation.flat:
        enc = FlatEncoder(seq_cfg, st_cfg)
        enc.name_encoder.load_state_dict(text.name_encoder.state_dict())
    else:
        enc = HierarchicalEncoder(seq_cfg, st_cfg, name_encoder=copy.deepcopy(text.name_encoder))
    lm = copy.deepcopy(text.lm)
    if cfg.objective.freeze_report_lm:
        # the pretrained language model stays fixed; its projection P_R trains
        for name, p in lm.named_parameters():
            p.requires_grad_(name.startswith("proj."))
    o = cfg.objective
    return ClipModel(enc, lm, proj_dim=lm.cfg.proj_dim, tau_init=o.tau_init, tau_p_init=o.tau_p_init)


def load_clip(run: RunDir, text: TextArtifacts | None = None) -> ClipModel:
    path = run.require("clip")
    _, state = read_checkpoint(path)
    model = build_model(run.config, text or load_text(run.require("text")))
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------------- data views


def report_text_for(study: VolumetricStudy, cfg: ExperimentConfig) -> list[str]:
    """Report items fed to the text encoder: summarized findings, or the raw prose."""
    if cfg.ablation.long_report:
        return [study.report.prose]
    return list(summarize(study.report, study.study_id).items)


def make_example(study: VolumetricStudy, grids: dict, cfg: ExperimentConfig) -> StudyExample:
    rep = summarize(study.report, study.study_id)
    if cfg.ablation.long_report:
        rep = type(rep)([study.report.prose], study.study_id)
    return StudyExample(study.study_id, study.study_name, [grids[s.seq_name] for s in study.sequences],
                        rep, study.labels, study.abnormal)


def view_of(ex: StudyExample, cfg: ExperimentConfig) -> StudyView:
    v = StudyView.of(ex)
    if cfg.ablation.no_sequence_name:
        v = StudyView(v.study_id, v.study_name, [SeqView(UNK_NAME, s.grid, s.select) for s in v.seqs], v.items)
    if cfg.ablation.no_study_name:
        v = StudyView(v.study_id, UNK_NAME, v.seqs, v.items)
    return v


@dataclass
class Dataset:
    studies: list[VolumetricStudy]
    examples: list[StudyExample]
    split: dict[str, np.ndarray]

    def part(self, name: str) -> list[StudyExample]:
        return [self.examples[i] for i in self.split[name]]

    def studies_of(self, name: str) -> list[VolumetricStudy]:
        return [self.studies[i] for i in self.split[name]]

    def labels(self, name: str) -> np.ndarray:
        return np.stack([self.studies[i].labels for i in self.split[name]]).astype(np.int64)


def load_dataset(run: RunDir) -> Dataset:
    cfg = run.config
    run.require("cohort")
    tok_index = json.loads(run.require("tokens").read_text())
    studies = load_cohort(run.cohort_dir)
    tok = load_tokenizer(run.require("tokenizer"))
    examples = []
    for st in studies:
        grids = tokenize_and_cache(st, tok, cfg.tokenizer.threshold, run.token_dir, tok_index["checksum"])
        examples.append(make_example(st, grids, cfg))
    return Dataset(studies, examples, splits(cfg))


# ---------------------------------------------------------------------- stages


def stage_generate(run: RunDir) -> dict:
    cfg = run.config
    studies = generate_cohort(cohort_config(cfg), seed=cfg.seed)
    manifest = save_cohort(studies, run.cohort_dir)
    digest = run.register("cohort", manifest)
    out = {"n_studies": len(studies), "n_abnormal": sum(s.abnormal for s in studies),
           "manifest_sha256": digest, "prevalence": np.stack([s.labels for s in studies]).mean(0)}
    run.write_metrics("cohort", out)
    return out


def stage_train_tokenizer(run: RunDir) -> dict:
    cfg = run.config
    run.require("cohort")
    studies = load_cohort(run.cohort_dir)
    train = [studies[i] for i in splits(cfg)["train"]]
    t = cfg.tokenizer
    spec = patch_spec(cfg)
    patches = collect_patches(train, spec, t.threshold, t.max_patches_per_sequence,
                              np.random.default_rng(cfg.seed))
    tok = train_tokenizer(patches, spec, TokenizerHParams(steps=t.steps, batch_size=t.batch_size, lr=t.lr,
                                                          codebook_size=t.codebook_size, channels=t.channels,
                                                          permute=t.permute, seed=cfg.seed))
    path = run.checkpoint("tokenizer.pt")
    save_tokenizer(tok, path)
    run.register("tokenizer", path)
    usage = getattr(tok, "_usage", None)
    out = {"val_l1": [h["val_l1"] for h in tok.history if "val_l1" in h],
           "codes_used": int((np.asarray(usage) > 0).sum()) if usage is not None else None,
           "checksum": tok.checksum()}
    run.write_metrics("tokenizer", out)
    return out


def stage_tokenize(run: RunDir) -> dict:
    cfg = run.config
    run.require("cohort")
    tok = load_tokenizer(run.require("tokenizer"))
    checksum = tok.checksum()
    studies = load_cohort(run.cohort_dir)
    counts = {}
    for st in studies:
        grids = tokenize_and_cache(st, tok, cfg.tokenizer.threshold, run.token_dir, checksum)
        counts[st.study_id] = {k: int(g.kept.sum()) for k, g in grids.items()}
    index = run.token_dir / "index.json"
    index.write_text(json.dumps({"checksum": checksum, "kept_tokens": counts}, sort_keys=True))
    run.register("tokens", index)
    kept = [v for c in counts.values() for v in c.values()]
    return {"sequences": len(kept), "mean_kept_tokens": float(np.mean(kept))}


def stage_pretrain_text(run: RunDir) -> dict:
    cfg = run.config
    ds = load_dataset(run)
    train = ds.part("train")
    texts = [" ; ".join(e.report.items) for e in train]
    corpus = texts + [s.report.prose for s in ds.studies_of("train")]
    vocab = WordVocab.from_corpus(corpus)
    t = cfg.text
    lm_cfg = LMConfig(dim=t.lm_dim, layers=t.lm_layers, heads=4, max_len=64 if not cfg.ablation.long_report else 160)
    lm, lm_hist = pretrain_report_lm(texts, LMHParams(epochs=t.lm_epochs, seed=cfg.seed, config=lm_cfg), vocab=vocab)
    pairs = [(g.seq_name, g) for e in train for g in e.grids]
    ne, _, name_hist = pretrain_name_encoder(pairs, NamePretrainHParams(steps=t.name_steps, out_dim=t.name_dim,
                                                                        seed=cfg.seed))
    text = TextArtifacts(lm, ne, {"lm": lm_hist, "name": name_hist})
    path = run.checkpoint("text.pt")
    save_text(path, text)
    run.register("text", path)
    out = {"val_ppl": [h["val_ppl"] for h in lm_hist], "name_loss": [h["loss"] for h in name_hist]}
    run.write_metrics("text", out)
    return out


def _train_clip_model(cfg: ExperimentConfig, ds: Dataset, text: TextArtifacts, steps: int | None = None,
                      seed: int | None = None, train_subset: Sequence[int] | None = None,
                      target_top1: float | None = None, log_fn=None) -> tuple[ClipModel, list[dict]]:
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    model = build_model(cfg, text)
    train = ds.part("train")
    if train_subset is not None:
        train = [train[i] for i in train_subset]
    to_view = lambda e: view_of(e, cfg)  # noqa: E731
    hist = train_clip(model, train, ds.part("val"), clip_hparams(cfg, steps, cfg.seed, target_top1),
                      log_fn=log_fn, to_view=to_view)
    return model, hist


def stage_train_clip(run: RunDir) -> dict:
    cfg = run.config
    ds = load_dataset(run)
    text = load_text(run.require("text"))
    t0 = time.process_time()
    model, hist = _train_clip_model(cfg, ds, text, log_fn=lambda r: emit("clip_step", **r))
    cpu = time.process_time() - t0
    path = run.checkpoint("clip.ckpt")
    save_checkpoint(path, model, {"experiment": cfg.to_dict()})
    run.register("clip", path)
    out = {"history": hist, "cpu_seconds": cpu}
    run.write_metrics("clip", {"history": hist})
    return out


def _views(ds: Dataset, part: str, cfg: ExperimentConfig) -> list[StudyView]:
    return [view_of(e, cfg) for e in ds.part(part)]


def grouped(sim: np.ndarray, cfg: ExperimentConfig, k: int) -> float:
    """Grouped retrieval; sets smaller than one group are scored as a single group."""
    return em.grouped_retrieval(sim, min(cfg.eval.group_size, len(sim)), cfg.seed, k)


def cached_embeddings(run: RunDir, model: ClipModel, ds: Dataset) -> dict[str, np.ndarray]:
    """Study embeddings for every split, cached under the CLIP checkpoint digest."""
    key = run.digest("clip")[:16]
    path = run.root / "caches" / f"embeddings_{key}.npz"
    if path.exists():
        emit("embedding_cache", status="hit", key=key)
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    emit("embedding_cache", status="miss", key=key)
    out = {p: model.study_embeddings(_views(ds, p, run.config)) for p in ("train", "val", "test")}
    np.savez(path, **out)
    return out


def acuity_targets(studies: Sequence[VolumetricStudy], table: MappingTable) -> tuple[np.ndarray, np.ndarray]:
    acu, refs = [], []
    for s in studies:
        a, r = acuity_referral_map(s.labels, table)
        acu.append(ACUITY_LEVELS.index(a))
        refs.append(r)
    return np.asarray(acu), np.stack(refs).astype(np.int64)


def _head_blob(h: TrainedHead) -> dict:
    return {"state": h.model.state_dict(), "mean": h.mean, "std": h.std, "kind": h.kind,
            "classes": h.classes, "target_scale": h.target_scale, "target_shift": h.target_shift,
            "in_dim": h.model.net[0].in_features, "out_dim": h.model.net[-1].out_features,
            "best_epoch": h.best_epoch, "best_metric": h.best_metric}


def _head_from_blob(b: dict, dropout: float) -> TrainedHead:
    from .heads import MLPHead
    m = MLPHead(b["in_dim"], b["out_dim"], dropout)
    m.load_state_dict(b["state"])
    return TrainedHead(m, b["mean"], b["std"], b["kind"], b["classes"], b["best_epoch"], b["best_metric"],
                       target_scale=b["target_scale"], target_shift=b["target_shift"])


def head_hparams(cfg: ExperimentConfig) -> HeadHParams:
    h = cfg.head
    return HeadHParams(epochs=h.epochs, batch_size=h.batch_size, lr=h.lr, dropout=h.dropout, seed=cfg.seed)


def stage_probe(run: RunDir) -> dict:
    cfg = run.config
    ds = load_dataset(run)
    model = load_clip(run)
    emb = cached_embeddings(run, model, ds)
    hp = head_hparams(cfg)
    y = {p: ds.labels(p) for p in ("train", "val", "test")}
    diag = train_diagnosis_head(emb["train"], y["train"], emb["val"], y["val"], hp)
    table = MappingTable.from_classes(cohort_config(cfg).classes)
    acu, ref = {}, {}
    for p in ("train", "val", "test"):
        acu[p], ref[p] = acuity_targets(ds.studies_of(p), table)
    acuity = train_acuity_head(emb["train"], acu["train"], emb["val"], acu["val"], hp)
    referral = train_referral_head(emb["train"], ref["train"], emb["val"], ref["val"], hp)
    ages = {p: np.array([s.attributes.age_years for s in ds.studies_of(p)]) for p in ("train", "val", "test")}
    age = train_age_head(emb["train"], ages["train"], emb["val"], ages["val"], hp)
    path = run.checkpoint("heads.pt")
    torch.save({k: _head_blob(h) for k, h in
                (("diagnosis", diag), ("acuity", acuity), ("referral", referral), ("age", age))}, path)
    run.register("heads", path)

    names = [c.name for c in cohort_config(cfg).classes]
    scores = diag.logits(emb["test"])
    mean_auc, per = em.mauc(scores, y["test"][:, diag.classes])
    pa = acuity.predict(emb["test"])
    ra = referral.logits(emb["test"])
    out = {
        "diagnosis_mauc": mean_auc,
        "diagnosis_auc": {names[c]: a for c, a in zip(diag.classes, per)},
        "acuity_accuracy": float((pa.argmax(1) == acu["test"]).mean()),
        "priority_spearman": _spearman(priority_score(pa), acu["test"]),
        "referral_auc": dict(zip([table.referral_names[c] for c in referral.classes],
                                 em.mauc(ra, ref["test"][:, referral.classes])[1])),
        "age_mae": float(np.abs(age.predict(emb["test"]) - ages["test"]).mean()),
        "embedding_sha256": embedding_checksum(emb["train"], emb["val"], emb["test"]),
    }
    run.write_metrics("probe", out)
    return out


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(a, b).statistic)


def load_heads(run: RunDir) -> dict[str, TrainedHead]:
    blob = torch.load(run.require("heads"), weights_only=False)
    return {k: _head_from_blob(b, run.config.head.dropout) for k, b in blob.items()}


def class_visibility(cfg: ExperimentConfig) -> dict[str, list[int]]:
    """Classes whose planted contrast appears only on T2-like, or only on T1-like, sequences."""
    t2, t1 = [], []
    for i, c in enumerate(cohort_config(cfg).classes):
        on_t1 = c.contrast["T1"] != 0 or c.contrast["T1POST"] != 0
        on_t2 = c.contrast["T2"] != 0 or c.contrast["FLAIR"] != 0
        if on_t2 and not on_t1:
            t2.append(i)
        elif on_t1 and not on_t2:
            t1.append(i)
    return {"t2_visible": t2, "t1_visible": t1}


def score_views(model: ClipModel, head: TrainedHead, views: Sequence[StudyView], n_classes: int) -> np.ndarray:
    """Head logits scattered back to all classes (classes without a head get zeros)."""
    z = head.logits(model.study_embeddings(list(views)))
    out = np.zeros((len(views), n_classes))
    out[:, head.classes] = z
    return out


def stage_evaluate(run: RunDir) -> dict:
    cfg = run.config
    ds = load_dataset(run)
    model = load_clip(run)
    emb = cached_embeddings(run, model, ds)
    heads = load_heads(run)
    diag = heads["diagnosis"]
    names = [c.name for c in cohort_config(cfg).classes]
    n_cls = len(names)
    test_views = _views(ds, "test", cfg)
    sim = model.similarity(test_views)
    all_views = [view_of(e, cfg) for e in ds.examples]
    sim_all = model.similarity(all_views)
    retrieval = {
        "test_top1": grouped(sim, cfg, 1),
        "test_top5": grouped(sim, cfg, 5),
        "cohort_top1": grouped(sim_all, cfg, 1),
        "cohort_top5": grouped(sim_all, cfg, 5),
        "group_size": min(cfg.eval.group_size, len(test_views)),
        "chance_top1": 1.0 / min(cfg.eval.group_size, len(test_views)),
    }
    y = ds.labels("test")
    logits = np.zeros((len(y), n_cls))
    logits[:, diag.classes] = diag.logits(emb["test"])
    mean_auc, per = em.mauc(logits[:, diag.classes], y[:, diag.classes])
    probs = em.sigmoid(logits[:, diag.classes])
    reliability = em.reliability_diagram(probs.ravel(), y[:, diag.classes].ravel(), cfg.eval.bin_width)
    npr = {}
    for c in diag.classes:
        if y[:, c].sum() > 0:
            overall, positives = em.npr(emb["test"], y[:, c], k=min(cfg.eval.npr_k, len(y) - 1))[0]
            npr[names[c]] = {"all_queries": overall, "positive_queries": positives}
    auc_mat, corr, order = em.cooccurrence_matrix(logits[:, diag.classes], y[:, diag.classes], order=True)

    vis = class_visibility(cfg)
    drop = em.modality_drop_eval(lambda vs: score_views(model, diag, vs, n_cls), test_views, y, em.t2_like)
    delta = np.asarray(drop["delta"])

    def group_delta(idx):
        idx = [i for i in idx if i in set(diag.classes) and not np.isnan(delta[i])]
        return float(np.mean(delta[idx])) if idx else None

    out = {
        "retrieval": retrieval,
        "diagnosis_mauc": mean_auc,
        "diagnosis_auc": {names[c]: a for c, a in zip(diag.classes, per)},
        "reliability": reliability,
        "npr": npr,
        "cooccurrence": {"auc": auc_mat, "label_corr": corr, "order": [names[diag.classes[i]] for i in order]},
        "modality_drop": {
            "auc_full": {names[c]: drop["auc_full"][c] for c in range(n_cls)},
            "auc_dropped": {names[c]: drop["auc_dropped"][c] for c in range(n_cls)},
            "t2_visible": [names[i] for i in vis["t2_visible"]],
            "t1_visible": [names[i] for i in vis["t1_visible"]],
            "t2_visible_delta": group_delta(vis["t2_visible"]),
            "t1_visible_delta": group_delta(vis["t1_visible"]),
            "n": drop["n"],
        },
    }
    run.write_metrics("evaluate", out)
    return out


def pick_sequence(study: VolumetricStudy, ex: StudyExample, prefer: Sequence[str] = ("FLAIR", "T2")) -> int:
    """Index of the sequence to perturb: first modality in ``prefer`` with >=2 kept tokens."""
    grids = ex.grids
    for mod in prefer:
        for i, s in enumerate(study.sequences):
            if s.modality == mod and grids[i].kept.sum() >= 2:
                return i
    return int(np.argmax([g.kept.sum() for g in grids]))


def lime_for_study(model: ClipModel, head: TrainedHead, class_col: int, ex: StudyExample, seq_index: int,
                   cfg: ExperimentConfig, seed: int, batch_size: int = 256):
    """Attribute one sequence of one study; only that sequence is fed to the model."""
    view = view_of(ex, cfg)
    grid = ex.grids[seq_index]
    kept = np.flatnonzero(grid.kept)
    name = view.seqs[0].name if cfg.ablation.no_sequence_name else grid.seq_name

    def score(masks: np.ndarray) -> np.ndarray:
        out = []
        for i in range(0, len(masks), batch_size):
            vs = [StudyView(view.study_id, view.study_name, [SeqView(name, grid, kept[m])], view.items)
                  for m in masks[i:i + batch_size]]
            out.append(head.logits(model.study_embeddings(vs, batch_size))[:, class_col])
        return np.concatenate(out)

    e = cfg.explain
    attr = lime_attribute(score, len(kept), e.n_samples, seed, e.sigma, token_index=kept)
    attr.seq_name = grid.seq_name
    return attr


def stage_explain(run: RunDir) -> dict:
    cfg = run.config
    ds = load_dataset(run)
    model = load_clip(run)
    diag = load_heads(run)["diagnosis"]
    names = [c.name for c in cohort_config(cfg).classes]
    c = names.index(cfg.explain.class_name)
    if c not in set(diag.classes):
        raise ValueError(f"no diagnosis head output for {cfg.explain.class_name}")
    col = list(diag.classes).index(c)
    spec = patch_spec(cfg)
    test = ds.split["test"]
    positives = [i for i in test if ds.studies[i].labels[c] == 1][: cfg.explain.max_studies]
    rows = []
    attr_dir = run.root / "metrics" / "attributions"
    attr_dir.mkdir(exist_ok=True)
    for n, i in enumerate(positives):
        st, ex = ds.studies[i], ds.examples[i]
        si = pick_sequence(st, ex)
        attr = lime_for_study(model, diag, col, ex, si, cfg, seed=cfg.seed + n)
        attr.class_index = c
        hit = topk_overlap(attr, ex.grids[si], spec, st.class_mask(c), cfg.explain.top_k)
        (attr_dir / f"{st.study_id}_{names[c]}.json").write_text(attr.to_json())
        if n == 0:
            render_overlay(run.root / "plots" / f"lime_{st.study_id}", st.sequences[si].voxels,
                           ex.grids[si], spec, attr, cfg.explain.top_k)
        rows.append({"study_id": st.study_id, "sequence": st.sequences[si].seq_name, "hit": bool(hit)})
    rate = float(np.mean([r["hit"] for r in rows])) if rows else None
    out = {"class": names[c], "top_k": cfg.explain.top_k, "hit_rate": rate, "studies": rows}
    run.write_metrics("explain", out)
    return out


def subgroup_specs() -> list[SubgroupSpec]:
    s = [SubgroupSpec.equals("sex", "F"), SubgroupSpec.equals("sex", "M")]
    s += [SubgroupSpec.equals("race_code", r) for r in range(3)]
    s += [SubgroupSpec.equals("insurer_code", 1), SubgroupSpec.equals("population_quartile", 1)]
    s.append(SubgroupSpec.equals("sex", "F") & SubgroupSpec.equals("race_code", 1))
    return s


def stage_fairness(run: RunDir) -> dict:
    cfg = run.config
    ds = load_dataset(run)
    model = load_clip(run)
    emb = cached_embeddings(run, model, ds)
    diag = load_heads(run)["diagnosis"]
    names = [c.name for c in cohort_config(cfg).classes]
    test_studies = ds.studies_of("test")
    y = ds.labels("test")[:, diag.classes]
    yhat = (em.sigmoid(diag.logits(emb["test"])) >= cfg.fairness.decision_threshold).astype(np.int64)
    table = FairnessTable(yhat, y, [asdict(s.attributes) for s in test_studies])
    everyone = [s.attributes for s in ds.studies]
    outcome = np.array([a.turnaround_days > 2.0 for a in everyone])
    exposures = {"population_quartile_1": np.array([a.population_quartile == 1 for a in everyone]),
                 "weekend": np.array([a.weekend_flag == 1 for a in everyone])}
    for r in sorted({a.region_code for a in everyone}):
        if r != 0:
            exposures[f"region_{r}"] = np.array([a.region_code == r for a in everyone])
    categories: dict[str, list[int]] = {}
    for j, c in enumerate(diag.classes):
        categories.setdefault(cohort_config(cfg).classes[c].category, []).append(j)
    f = cfg.fairness
    out = fairness_report(table, subgroup_specs(), [names[c] for c in diag.classes], f.threshold, exposures,
                          outcome, categories, seed=cfg.seed, n=f.n, iters=f.iters)
    run.write_metrics("fairness", out)
    return out


def stage_scale_sweep(run: RunDir) -> dict:
    cfg = run.config
    ds = load_dataset(run)
    text = load_text(run.require("text"))
    n_train = len(ds.split["train"])
    test_views = _views(ds, "test", cfg)

    def one(frac: float, seed: int) -> float:
        perm = np.random.default_rng(seed).permutation(n_train)
        subset = np.sort(perm[: max(2, int(round(frac * n_train)))])
        model, _ = _train_clip_model(cfg, ds, text, steps=cfg.eval.scale_steps, seed=seed, train_subset=subset)
        val = grouped(model.similarity(test_views), cfg, 1)
        emit("scale_point", fraction=frac, seed=seed, top1=val)
        return val

    rep = em.scaling_harness(cfg.eval.scale_fractions, cfg.eval.scale_seeds, one)
    out = {"fractions": rep.fractions, "values": {str(k): v for k, v in rep.values.items()},
           "medians": rep.medians, "noise_band": rep.noise_band,
           "inversions": [list(i) for i in rep.inversions], "passes": rep.passes}
    run.write_metrics("scaling", out)
    return out


def convergence_steps(cfg: ExperimentConfig, ds: Dataset, text: TextArtifacts, seed: int, target: float,
                      max_steps: int) -> int | None:
    cfg = cfg.replace(objective={"eval_every": cfg.objective.convergence_eval_every})
    _, hist = _train_clip_model(cfg, ds, text, steps=max_steps, seed=seed, target_top1=target)
    return steps_to_target(hist, "top1", target)


def stage_ablate(run: RunDir, ablation: str) -> dict:
    """Retrain CLIP with one design toggle flipped and compare to the run's own baseline."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {', '.join(ABLATIONS)}")
    cfg = run.config
    variant = cfg.replace(ablation={ablation.replace("-", "_"): True})
    ds = load_dataset(run)
    vds = ds
    if variant.ablation.long_report:
        vds = Dataset(ds.studies, [make_example(s, {g.seq_name: g for g in e.grids}, variant)
                                   for s, e in zip(ds.studies, ds.examples)], ds.split)
    text = load_text(run.require("text"))
    results = {}
    for name, c, d in (("baseline", cfg, ds), (ablation, variant, vds)):
        if name == "baseline" and run.has("clip"):
            model, hist = load_clip(run, text), run.read_metrics("clip")["history"]
        else:
            model, hist = _train_clip_model(c, d, text)
        sim = model.similarity([view_of(e, c) for e in d.part("test")])
        results[name] = {"history": hist, "test_top1": grouped(sim, cfg, 1), "test_top5": grouped(sim, cfg, 5)}
    target = cfg.objective.convergence_target
    for r in results.values():
        r["steps_to_target"] = steps_to_target(r["history"], "top1", target)
    out = {"ablation": ablation, "target_top1": target, **results}
    run.write_metrics(f"ablate_{ablation}", out)
    return out


STAGE_FUNCS: dict[str, Callable[..., dict]] = {
    "generate": stage_generate,
    "train-tokenizer": stage_train_tokenizer,
    "tokenize": stage_tokenize,
    "pretrain-text": stage_pretrain_text,
    "train-clip": stage_train_clip,
    "probe": stage_probe,
    "evaluate": stage_evaluate,
    "explain": stage_explain,
    "fairness": stage_fairness,
    "scale-sweep": stage_scale_sweep,
    "ablate": stage_ablate,
}

# stages run by ``--stage all``
MAIN_PIPELINE = ("generate", "train-tokenizer", "tokenize", "pretrain-text", "train-clip", "probe",
                 "evaluate", "explain", "fairness")


def run_stage(run: RunDir, stage: str, ablation: str | None = None) -> dict:
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    torch.manual_seed(run.config.seed)
    emit("stage_start", stage=stage, run=str(run.root))
    t0 = time.time()
    if stage == "ablate":
        if ablation is None:
            raise ValueError(f"--ablation is required for the ablate stage ({', '.join(ABLATIONS)})")
        out = STAGE_FUNCS[stage](run, ablation)
    else:
        out = STAGE_FUNCS[stage](run)
    emit("stage_end", stage=stage, seconds=round(time.time() - t0, 2))
    return out
