"""End-to-end orchestration: every stage reads its inputs from the run
directory and writes its outputs there, so stages can be resumed, rerun
individually, or skipped when already complete."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import encoding as enc
from . import geometry as geo
from . import lesion as les
from . import microlm as lm
from . import stats as st
from . import synth
from .config import ExperimentConfig, derive_seed, save_config
from .tensorio import ArchiveError, read_archive, write_archive

log = logging.getLogger(__name__)

STAGES = ("synth", "pretrain", "finetune", "importance", "masks", "ablate", "embed",
          "encode", "stats", "lpi", "geometry", "probe", "report")

DEPENDS = {
    "synth": (),
    "pretrain": ("synth",),
    "finetune": ("pretrain",),
    "importance": ("finetune",),
    "masks": ("importance",),
    "ablate": ("masks",),
    "embed": ("ablate",),
    "encode": ("embed",),
    "stats": ("encode",),
    "lpi": ("stats",),
    "geometry": ("embed",),
    "probe": ("embed",),
    "report": ("ablate", "stats", "lpi", "geometry", "probe"),
}


class DependencyError(RuntimeError):
    """A stage was requested before the artifacts it needs exist."""


class ReportError(RuntimeError):
    pass


def variants(cfg: ExperimentConfig) -> list[str]:
    return ["intact", "random", "core"] + [f"specific-{L}" for L in cfg.language_ids]


def lesion_variants(cfg: ExperimentConfig) -> list[str]:
    return variants(cfg)[1:]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


@dataclass
class RunManifest:
    config_hash: str
    stages: dict[str, dict] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    created_at: str = field(default_factory=_now)

    def is_done(self, stage: str, root: Path | None = None) -> bool:
        info = self.stages.get(stage)
        if not info or not info.get("done"):
            return False
        if root is not None:
            return all((root / a).exists() for a in info.get("artifacts", []))
        return True

    @property
    def artifacts(self) -> list[str]:
        return [a for s in STAGES for a in self.stages.get(s, {}).get("artifacts", [])]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# small IO helpers


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _split_runs(emb: lm.TokenEmbeddings, n_runs: int, trs: int, tr: float) -> list[np.ndarray]:
    run_len = trs * tr
    runs = []
    for r in range(n_runs):
        sel = (emb.onsets >= r * run_len) & (emb.onsets < (r + 1) * run_len)
        runs.append(enc.align_to_tr(emb.vectors[sel], emb.onsets[sel] - r * run_len, tr, trs))
    return runs


def voxel_rois(n_voxels: int, n_rois: int) -> dict[str, list[int]]:
    """Contiguous partition of the synthetic voxel axis into ROIs."""
    n_rois = max(1, min(n_rois, n_voxels))
    return {f"roi{i}": [int(v) for v in part]
            for i, part in enumerate(np.array_split(np.arange(n_voxels), n_rois))}


# ---------------------------------------------------------------------------
# the run


class Run:
    """One experiment directory plus its manifest."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1):
        cfg.validate()
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.threads = max(1, int(threads))
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        h = cfg.content_hash()
        manifest = None
        if self.manifest_path.exists():
            try:
                manifest = RunManifest.load(self.manifest_path)
            except (ValueError, TypeError):
                log.warning("unreadable manifest; starting fresh")
            if manifest is not None and manifest.config_hash != h:
                log.info("config changed; previous stage results are invalidated")
                manifest = None
        self.manifest = manifest or RunManifest(h)
        save_config(cfg, self.root / "config.json")
        self._artifacts: list[str] | None = None

    # -- bookkeeping --------------------------------------------------------

    def seed(self, name: str) -> int:
        s = derive_seed(self.cfg.seed, name)
        self.manifest.seeds[name] = s
        return s

    def out(self, rel: str) -> Path:
        """Path of an artifact the current stage writes."""
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if self._artifacts is not None and rel not in self._artifacts:
            self._artifacts.append(rel)
        return p

    def need(self, rel: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise DependencyError(f"missing artifact {rel}; run the stage that produces it first")
        return p

    def archive(self, rel: str) -> dict[str, np.ndarray]:
        try:
            return {k: v.astype(np.float64) for k, v in read_archive(self.need(rel)).items()}
        except ArchiveError as exc:
            raise DependencyError(f"unreadable artifact {rel}: {exc}") from exc

    def model(self, rel: str) -> lm.ParamStore:
        self.need(rel)
        return lm.load_model(self.root / rel)

    def pmap(self, fn, items):
        """Ordered map, optionally threaded; results never depend on ``threads``."""
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))

    def run_stage(self, stage: str) -> bool:
        """Run one stage unless already complete. Returns True if it ran."""
        if self.manifest.is_done(stage, self.root):
            log.info("stage %s already complete", stage)
            return False
        for dep in DEPENDS[stage]:
            if not self.manifest.is_done(dep, self.root):
                raise DependencyError(f"stage {stage!r} needs {dep!r}, which has not completed")
        log.info("stage %s", stage)
        self._artifacts = []
        self.manifest.stages[stage] = {"done": False, "artifacts": [], "started_at": _now()}
        self.manifest.save(self.manifest_path)
        t0 = time.perf_counter()
        getattr(self, f"stage_{stage}")()
        self.manifest.stages[stage].update(
            done=True, artifacts=sorted(self._artifacts), finished_at=_now(),
            seconds=round(time.perf_counter() - t0, 3))
        self._artifacts = None
        self.manifest.save(self.manifest_path)
        return True

    # -- corpora / models ---------------------------------------------------

    def corpus(self, kind: str, lang: str) -> lm.TimedCorpus:
        return lm.read_corpus_csv(self.need(f"synth/{kind}_{lang}.csv"))

    def stage_synth(self) -> None:
        cfg = self.cfg
        synth.save_specs(self.out("synth/languages.json"), cfg.languages)
        sizes = {"train": cfg.corpora.train_tokens, "heldout": cfg.corpora.heldout_tokens,
                 "story": cfg.story_tokens, "probe": cfg.corpora.probe_tokens}
        for spec in cfg.languages:
            for kind, n in sizes.items():
                c = synth.gen_corpus(spec, n, self.seed(f"corpus/{kind}/{spec.id}"),
                                     cfg.model.vocab_size)
                lm.write_corpus_csv(c, self.out(f"synth/{kind}_{spec.id}.csv"))

    def stage_pretrain(self) -> None:
        cfg, tc = self.cfg, self.cfg.training
        mix = np.concatenate([self.corpus("train", L).tokens for L in cfg.language_ids])
        store = lm.init_model(cfg.model)
        losses = lm.train(store, mix, tc.pretrain_steps, tc.pretrain_lr,
                          batch_size=tc.batch_size, seq_len=tc.seq_len,
                          seed=self.seed("pretrain"), clip=tc.clip,
                          lr_final=tc.pretrain_lr_final)
        lm.save_model(store, self.out("models/intact"))
        write_csv(self.out("train/pretrain_loss.csv"), ["step", "loss"], enumerate(losses))

    def stage_finetune(self) -> None:
        cfg, tc = self.cfg, self.cfg.training
        base = self.model("models/intact")
        for L in cfg.language_ids:
            _, acc = lm.finetune_language(base, self.corpus("train", L), tc.finetune_steps,
                                          tc.finetune_lr, batch_size=tc.batch_size,
                                          seq_len=tc.seq_len, seed=self.seed(f"finetune/{L}"),
                                          clip=tc.clip)
            write_archive(acc.sums, self.out(f"finetune/grads_{L}"))

    def stage_importance(self) -> None:
        base = self.model("models/intact")
        for L in self.cfg.language_ids:
            sums = self.archive(f"finetune/grads_{L}")
            imp = les.importance(base, lm.GradAccumulator(sums, 0), L)
            write_archive(imp.scores, self.out(f"importance/importance_{L}"))

    def stage_masks(self) -> None:
        cfg, lc = self.cfg, self.cfg.lesion
        maps = {L: les.ImportanceMap(L, self.archive(f"importance/importance_{L}"))
                for L in cfg.language_ids}
        comps = tuple(lc.components)
        core = les.select_topk(les.core_score(list(maps.values())), lc.fraction, lc.scope,
                               comps, kind="core")
        masks = {"core": core,
                 "random": les.random_mask(core.bits, lc.fraction, self.seed(f"random_mask/{lc.seed}"),
                                           lc.scope, comps)}
        for L in cfg.language_ids:
            spec = les.specificity_score(maps, L, lc.scope, comps)
            masks[f"specific-{L}"] = les.select_topk(spec.scores, lc.fraction, lc.scope, comps,
                                                     kind=f"specific-{L}")
        rows = []
        for v in lesion_variants(cfg):
            m = masks[v]
            write_archive(les.mask_to_store(m), self.out(f"masks/{v}"))
            les.write_mask_summary(self.out(f"masks/{v}_summary.csv"), m, core, comps)
            rows.append((v, m.count(), les.overlap_fraction(m, core)))
        write_csv(self.out("masks/overview.csv"), ["variant", "selected", "overlap_with_core"], rows)

    def lesion_mask(self, v: str) -> les.LesionMask:
        return les.mask_from_store(self.archive(f"masks/{v}"), v, self.cfg.lesion.fraction)

    def stage_ablate(self) -> None:
        cfg = self.cfg
        base = self.model("models/intact")
        models = {"intact": base}
        for v in lesion_variants(cfg):
            models[v] = les.apply_lesion(base, self.lesion_mask(v))
            lm.save_model(models[v], self.out(f"models/{v}"))
        held = {L: self.corpus("heldout", L) for L in cfg.language_ids}
        jobs = [(v, L) for v in variants(cfg) for L in cfg.language_ids]
        ppl = dict(zip(jobs, self.pmap(lambda j: lm.perplexity(models[j[0]], held[j[1]]), jobs)))
        rows = [(v, L, ppl[v, L], ppl[v, L] / ppl["intact", L]) for v, L in jobs]
        write_csv(self.out("ablate/perplexity.csv"),
                  ["variant", "language", "perplexity", "ratio_to_intact"], rows)

    # -- embeddings and encoding -------------------------------------------

    def _heldout_count(self) -> int:
        return max(self.cfg.geometry.tokens_per_language, self.cfg.subjects.heldout_tokens)

    def stage_embed(self) -> None:
        cfg, sc = self.cfg, self.cfg.subjects
        corpora = {(k, L): self.corpus(k, L) for k in ("story", "heldout", "probe")
                   for L in cfg.language_ids}
        n_held = self._heldout_count()
        models = {v: self.model(f"models/{v}") for v in variants(cfg)}

        def job(key):
            v, L = key
            m = models[v]
            story = lm.extract_embeddings(m, corpora["story", L])
            runs = _split_runs(story, sc.n_runs, sc.trs_per_run, cfg.encoding.tr)
            held_c = corpora["heldout", L]
            held = lm.extract_embeddings(m, held_c.slice(0, min(n_held, len(held_c))))
            probe = lm.extract_embeddings(m, corpora["probe", L])
            return runs, held.vectors, probe

        keys = [(v, L) for v in variants(cfg) for L in cfg.language_ids]
        for (v, L), (runs, held, probe) in zip(keys, self.pmap(job, keys)):
            write_archive({f"run{r:02d}": x for r, x in enumerate(runs)},
                          self.out(f"embeddings/{v}/{L}_story"))
            write_archive({"vectors": held}, self.out(f"embeddings/{v}/{L}_heldout"))
            write_archive({"vectors": probe.vectors,
                           "sentence_ids": probe.sentence_ids.astype(np.float64)},
                          self.out(f"embeddings/{v}/{L}_probe"))

    def features(self, v: str, L: str) -> enc.EmbeddingSeries:
        arc = self.archive(f"embeddings/{v}/{L}_story")
        return enc.EmbeddingSeries([arc[k] for k in sorted(arc)], self.cfg.encoding.tr,
                                   self.cfg.encoding.lag)

    def heldout(self, v: str, L: str) -> np.ndarray:
        return self.archive(f"embeddings/{v}/{L}_heldout")["vectors"]

    def planted_basis(self, L: str) -> tuple[np.ndarray, np.ndarray]:
        """Embedding-space directions the synthetic subjects of group ``L``
        respond to, with a per-direction contrast score."""
        sc, langs = self.cfg.subjects, self.cfg.language_ids
        n = sc.heldout_tokens
        if sc.dims_from == "lesion":
            lesioned = {M: self.heldout(f"specific-{M}", L)[:n] for M in langs}
            return synth.lesion_contrast_basis(self.heldout("intact", L)[:n], lesioned, L,
                                               sc.planted_dims)
        held = {M: self.heldout("intact", M)[:n] for M in langs}
        dims = synth.language_contrast_dims(held, L, sc.planted_dims)
        return synth.axis_basis(self.cfg.model.dim, dims), dims.astype(np.float64)

    def stage_encode(self) -> None:
        cfg, sc, ec = self.cfg, self.cfg.subjects, self.cfg.encoding
        feats = {(v, L): self.features(v, L) for v in variants(cfg) for L in cfg.language_ids}
        bolds = {}
        basis_rows = []
        for L in cfg.language_ids:
            basis, score = self.planted_basis(L)
            basis_rows += [(L, j, float(x)) for j, x in enumerate(score)]
            write_archive({"basis": basis}, self.out(f"subjects/{L}/planted_basis"))
            k = basis.shape[1]
            loadings = np.random.default_rng(self.seed(f"weights/{L}")).standard_normal(
                (k, sc.n_voxels))
            for s in range(sc.per_language):
                rng = np.random.default_rng(self.seed(f"subject/{L}/{s}"))
                Ws = basis @ (loadings + sc.subject_jitter * rng.standard_normal(loadings.shape))
                subject = synth.SynthSubjectSpec(L, sc.n_runs, sc.trs_per_run, sc.n_voxels, sc.snr,
                                                 Ws, self.seed(f"bold/{L}/{s}"))
                bold = synth.gen_bold(subject, feats["intact", L])
                write_archive({"W": Ws}, self.out(f"subjects/{L}/sub{s:02d}_weights"))
                write_archive({f"run{r:02d}": y for r, y in enumerate(bold.runs)},
                              self.out(f"subjects/{L}/sub{s:02d}_bold"))
                bolds[L, s] = bold
        # score: contrast eigenvalue ("lesion") or selected axis ("language")
        write_csv(self.out("subjects/planted_basis.csv"), ["language", "component", "score"],
                  basis_rows)

        jobs = [(v, L, s) for v in variants(cfg) for L in cfg.language_ids
                for s in range(sc.per_language)]

        def job(key):
            v, L, s = key
            return enc.encode_subject(feats[v, L], bolds[L, s], ec.lambda_grid, ec.lambda_mode)

        for (v, L, s), res in zip(jobs, self.pmap(job, jobs)):
            stem = f"encoding/{v}/{L}/sub{s:02d}"
            write_csv(self.out(f"{stem}_folds.csv"), ["voxel", "fold", "r"],
                      ((vox, f, res.r_per_fold[f, vox]) for vox in range(sc.n_voxels)
                       for f in range(res.r_per_fold.shape[0])))
            lam = res.lambda_chosen
            write_csv(self.out(f"{stem}_summary.csv"),
                      ["voxel", "r_mean", "lambda", "degenerate_flag"],
                      ((vox, res.r_mean[vox], lam[vox], bool(res.degenerate[vox]))
                       for vox in range(sc.n_voxels)))

    def r_matrix(self, v: str, L: str) -> np.ndarray:
        """Subjects x voxels matrix of cross-validated mean r."""
        rows = []
        for s in range(self.cfg.subjects.per_language):
            rows.append([float(r["r_mean"]) for r in
                         read_csv(self.need(f"encoding/{v}/{L}/sub{s:02d}_summary.csv"))])
        if not rows:
            raise ReportError("no subjects")
        return np.array(rows)

    # -- statistics ---------------------------------------------------------

    def _write_statmap(self, rel: str, m: st.StatMap) -> None:
        write_csv(self.out(rel), ["voxel", "t", "p", "q", "sig"],
                  ((v, m.t[v], m.p[v], m.q[v], bool(m.sig[v])) for v in range(len(m.t))))

    def stage_stats(self) -> None:
        cfg, sc = self.cfg, self.cfg.stats
        z = {(v, L): st.fisher_z(self.r_matrix(v, L)) for v in variants(cfg)
             for L in cfg.language_ids}
        for v in variants(cfg):
            sigs = []
            for L in cfg.language_ids:
                t, p, df, deg = st.one_sample_ttest(z[v, L], 0.0)
                m = st.stat_map(t, p, df, deg, sc.fdr_q, sc.fdr_method)
                self._write_statmap(f"stats/onesample/{v}_{L}.csv", m)
                sigs.append(m.sig)
            conj = st.conjunction_mask(sigs)
            write_csv(self.out(f"stats/conjunction_{v}.csv"), ["voxel", "sig"], enumerate(conj))
        for v in lesion_variants(cfg):
            for L in cfg.language_ids:
                # positive t means the lesion lowered encoding performance
                t, p, df, deg = st.paired_ttest(z["intact", L], z[v, L])
                self._write_statmap(f"stats/paired/{v}_{L}.csv",
                                    st.stat_map(t, p, df, deg, sc.fdr_q, sc.fdr_method))
        rois = voxel_rois(cfg.subjects.n_voxels, sc.n_rois)
        with open(self.out("stats/rois.json"), "w") as fh:
            json.dump(rois, fh, indent=1)
        rows = []
        for v in variants(cfg):
            for L in cfg.language_ids:
                summary = st.roi_summary(self.r_matrix(v, L).mean(axis=0), rois)
                rows += [(v, L, name, val) for name, val in summary.items()]
        write_csv(self.out("stats/roi_summary.csv"), ["variant", "language", "roi", "mean_r"], rows)

    def statmap(self, rel: str) -> dict[str, np.ndarray]:
        rows = read_csv(self.need(rel))
        return {"t": np.array([float(r["t"]) for r in rows]),
                "q": np.array([float(r["q"]) for r in rows]),
                "sig": np.array([r["sig"] == "1" for r in rows])}

    def stage_lpi(self) -> None:
        cfg = self.cfg
        langs = cfg.language_ids
        # matched-lesion degradation map of each language group
        norm = {}
        for L in langs:
            t = self.statmap(f"stats/paired/specific-{L}_{L}.csv")["t"]
            try:
                norm[L] = st.minmax_rectify(t)
            except ValueError:
                log.warning("constant t-map for %s; LPI input set to zero", L)
                norm[L] = np.zeros_like(t)
        rows = []
        for L in langs:
            mask = self.statmap(f"stats/onesample/intact_{L}.csv")["sig"]
            single = st.lpi(norm[L], [norm[M] for M in langs if M != L], cfg.stats.epsilon,
                            mask, L)
            avg = st.cross_model_average([single])
            write_csv(self.out(f"lpi/lpi_{L}.csv"), ["voxel", "lpi"], enumerate(avg.values))
            d = avg.values[avg.defined]
            rows.append((L, int(d.size), float(d.mean()) if d.size else math.nan,
                         float(d.min()) if d.size else math.nan,
                         float(d.max()) if d.size else math.nan))
        write_csv(self.out("lpi/summary.csv"), ["language", "n_defined", "mean_lpi", "min_lpi",
                                                "max_lpi"], rows)

    # -- geometry and probing ----------------------------------------------

    def labelled_heldout(self, v: str):
        n = self.cfg.geometry.tokens_per_language
        X, y = [], []
        for L in self.cfg.language_ids:
            h = self.heldout(v, L)[:n]
            X.append(h)
            y += [L] * len(h)
        return np.concatenate(X), np.array(y)

    def stage_geometry(self) -> None:
        cfg = self.cfg
        rows, sil = [], {}
        for v in variants(cfg):
            X, y = self.labelled_heldout(v)
            k = min(cfg.geometry.pca_dims, *X.shape)
            sil[v, "original"] = geo.silhouette(X, y)
            sil[v, f"pca{k}"] = geo.silhouette(geo.pca_project(X, k), y)
            for space in ("original", f"pca{k}"):
                rows.append((v, space, sil[v, space]))
            xy = geo.pca_project(X, 2)
            write_csv(self.out(f"geometry/projection_{v}.csv"), ["x", "y", "label"],
                      ((a, b, lab) for (a, b), lab in zip(xy, y)))
        for space in ("original", f"pca{k}"):
            rows.append(("delta_intact_minus_core", space, sil["intact", space] - sil["core", space]))
        write_csv(self.out("geometry/silhouette.csv"), ["variant", "space", "silhouette"], rows)

    def stage_probe(self) -> None:
        cfg, pc = self.cfg, self.cfg.probe
        probe_cfg = pc.probe_config(self.seed("probe"))
        jobs = [(v, L) for v in variants(cfg) for L in cfg.language_ids]

        def job(key):
            v, L = key
            arc = self.archive(f"embeddings/{v}/{L}_probe")
            sid = arc["sentence_ids"].astype(np.int64)
            emb = lm.TokenEmbeddings(arc["vectors"], np.zeros(len(sid)), np.arange(len(sid)), sid)
            task = geo.sentence_length_task(emb, pc.n_bins, L)
            tr, dev, te = geo.split_indices(len(task), seed=self.seed(f"probe_split/{L}"))
            return geo.probe_train_eval(task.subset(tr), task.subset(dev), task.subset(te),
                                        probe_cfg)

        rows = [("sentence_length", L, v, m["accuracy"], m["precision"], m["recall"], m["f1"])
                for (v, L), m in zip(jobs, self.pmap(job, jobs))]
        write_csv(self.out("probe/probe.csv"),
                  ["task", "language", "model_variant", "accuracy", "precision", "recall", "f1"],
                  rows)

    # -- report -------------------------------------------------------------

    def stage_report(self) -> None:
        emit_report(self)


def emit_report(run: Run) -> list[Path]:
    """Collect tables for every analysis into ``report/`` plus figures."""
    from . import plotting

    cfg = run.cfg
    langs, vs = cfg.language_ids, variants(cfg)
    if cfg.subjects.per_language < 1:
        raise ReportError("no subjects to report on")
    for stage in ("encode", "stats"):
        if not run.manifest.is_done(stage, run.root):
            raise ReportError(f"stage {stage!r} incomplete")

    subj_mean = {(v, L): run.r_matrix(v, L).mean(axis=1) for v in vs for L in langs}

    def sem(x):
        return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0

    mean_rows = [(v, L, float(subj_mean[v, L].mean()), sem(subj_mean[v, L]), len(subj_mean[v, L]))
                 for v in vs for L in langs]
    write_csv(run.out("report/mean_r.csv"), ["variant", "language", "mean_r", "sem", "n_subjects"],
              mean_rows)
    for L in langs:
        write_csv(run.out(f"report/baseline_contrast_{L}.csv"), ["variant", "mean_r", "sem", "n_subjects"],
                  [(v, float(subj_mean[v, L].mean()), sem(subj_mean[v, L]), len(subj_mean[v, L]))
                   for v in ("intact", "random", "core")])

    paired_rows, paired_summary, tmean = [], [], {}
    for v in lesion_variants(cfg):
        for L in langs:
            rows = read_csv(run.need(f"stats/paired/{v}_{L}.csv"))
            t = np.array([float(r["t"]) for r in rows])
            tmean[v, L] = float(t.mean())
            n_sig = sum(r["sig"] == "1" for r in rows)
            paired_rows += [(v, L, r["voxel"], r["t"], r["p"], r["q"], r["sig"]) for r in rows]
            paired_summary.append((v, L, tmean[v, L], n_sig, len(rows)))
    write_csv(run.out("report/paired_tests.csv"),
              ["variant", "language", "voxel", "t", "p", "q", "sig"], paired_rows)
    write_csv(run.out("report/paired_summary.csv"),
              ["variant", "language", "mean_t", "n_significant", "n_voxels"], paired_summary)
    write_csv(run.out("report/lesion_matrix.csv"), ["lesion", "group", "mean_t"],
              [(f"specific-{A}", B, tmean[f"specific-{A}", B]) for A in langs for B in langs])

    for L in langs:
        shutil.copyfile(run.need(f"lpi/lpi_{L}.csv"), run.out(f"report/lpi_{L}.csv"))
    copies = {"lpi/summary.csv": "report/lpi_summary.csv",
              "ablate/perplexity.csv": "report/perplexity.csv",
              "geometry/silhouette.csv": "report/silhouette.csv",
              "probe/probe.csv": "report/probe.csv",
              "stats/roi_summary.csv": "report/roi_summary.csv",
              "masks/overview.csv": "report/masks.csv",
              "geometry/projection_intact.csv": "report/projection_intact.csv",
              "geometry/projection_core.csv": "report/projection_core.csv"}
    for src, dst in copies.items():
        shutil.copyfile(run.need(src), run.out(dst))

    ppl = read_csv(run.root / "report/perplexity.csv")
    sil = read_csv(run.root / "report/silhouette.csv")
    probe = read_csv(run.root / "report/probe.csv")
    lines = [f"# Lesion experiment report", "",
             f"config hash `{run.manifest.config_hash}`, {len(vs)} model variants, "
             f"{cfg.subjects.per_language} subjects per language group.", "",
             "## Encoding (mean r over voxels and subjects)", "",
             "| variant | " + " | ".join(langs) + " |", "|---" * (len(langs) + 1) + "|"]
    for v in vs:
        lines.append(f"| {v} | " + " | ".join(f"{subj_mean[v, L].mean():.4f}" for L in langs) + " |")
    lines += ["", "## Matched vs mismatched lesions (mean paired t, rows lesion, columns group)",
              "", "| lesion | " + " | ".join(langs) + " |", "|---" * (len(langs) + 1) + "|"]
    for A in langs:
        lines.append(f"| specific-{A} | " + " | ".join(f"{tmean[f'specific-{A}', B]:.3f}"
                                                       for B in langs) + " |")
    lines += ["", "## Perplexity ratio to intact", "", "| variant | " + " | ".join(langs) + " |",
              "|---" * (len(langs) + 1) + "|"]
    for v in vs:
        vals = {r["language"]: float(r["ratio_to_intact"]) for r in ppl if r["variant"] == v}
        lines.append(f"| {v} | " + " | ".join(f"{vals[L]:.4f}" for L in langs) + " |")
    lines += ["", "## Silhouette of language clusters", ""]
    for r in sil:
        lines.append(f"- {r['variant']} ({r['space']}): {float(r['silhouette']):.4f}")
    lines += ["", "## Sentence-length probe accuracy", ""]
    for r in probe:
        lines.append(f"- {r['model_variant']} / {r['language']}: {float(r['accuracy']):.3f}")
    lines.append("")
    run.out("report/summary.md").write_text("\n".join(lines))

    return plotting.render_report_figures(run.root / "report", langs, vs, run.out)


# ---------------------------------------------------------------------------


def resolve_stages(stages) -> list[str]:
    if stages is None:
        return list(STAGES)
    if isinstance(stages, str):
        stages = [s.strip() for s in stages.split(",") if s.strip()]
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise lm.ConfigError(f"unknown stages {unknown}; choose from {', '.join(STAGES)}")
    return [s for s in STAGES if s in set(stages)]


def run_pipeline(cfg: ExperimentConfig, stages=None, threads: int = 1) -> RunManifest:
    """Run the requested stages (all by default) in dependency order.

    Completed stages are skipped; a stage whose dependencies are neither
    requested nor complete raises :class:`DependencyError`.
    """
    todo = resolve_stages(stages)
    run = Run(cfg, threads)
    with threadpool_limits(limits=1):
        for stage in todo:
            run.run_stage(stage)
    return run.manifest
