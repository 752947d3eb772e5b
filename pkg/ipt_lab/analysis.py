"""Embedding-space analysis: 2-D projection, distance statistics and
nearest-token case studies."""

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.decomposition import PCA

from .backbone import Transformer
from .prompts import PromptVectors
from .text import LabeledInstance, TaskSpec, Vocabulary

log = logging.getLogger("ipt-lab")

DISTANCE_ATOL = 1e-12


@dataclass
class Projection2D:
    coords: np.ndarray
    categories: List[str]
    ids: List[str]
    explained: np.ndarray
    components: np.ndarray

    def points(self):
        return [(float(x), float(y), c, i) for (x, y), c, i in zip(self.coords, self.categories, self.ids)]


def project_2d(vectors: np.ndarray, labels: Sequence[str], ids: Optional[Sequence[str]] = None,
               seed: int = 0) -> Projection2D:
    """Principal-component projection onto the top two components.

    Each component's sign is fixed so that its largest-magnitude loading is
    positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError(f"need at least 3 vectors of dimension >= 2, got shape {x.shape}")
    if len(labels) != x.shape[0]:
        raise ValueError(f"{len(labels)} labels for {x.shape[0]} vectors")
    total = float(x.var(axis=0, ddof=1).sum())
    if total <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise ValueError("input has rank 0; every vector is identical")
    pca = PCA(n_components=2, svd_solver="full", random_state=seed).fit(x)
    comps = pca.components_.T.copy()
    for j in range(comps.shape[1]):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    ids = [str(i) for i in ids] if ids is not None else [str(i) for i in range(x.shape[0])]
    return Projection2D(coords=(x - pca.mean_) @ comps, categories=[str(c) for c in labels], ids=ids,
                        explained=pca.explained_variance_ratio_.copy(), components=comps)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero vector at row {int(np.argmin(norms))}; cosine distance is undefined")
    return x / norms[:, None]


def distance_stats(vectors: np.ndarray, categories: Sequence[str]) -> Dict[str, float]:
    """Mean pairwise cosine distance within and across categories.

    ``ratio`` is intra/inter, and 0 when inter is 0. Distances within
    ``DISTANCE_ATOL`` of 0 count as 0.
    """
    cats = np.asarray([str(c) for c in categories])
    names, counts = np.unique(cats, return_counts=True)
    if len(names) < 2:
        raise ValueError("distance_stats needs at least 2 categories")
    if counts.min() < 2:
        raise ValueError(f"category {names[np.argmin(counts)]!r} has fewer than 2 points")
    unit = _unit_rows(vectors)
    dist = 1.0 - unit @ unit.T
    # same-direction rows come out at rounding-noise distance
    dist[np.isclose(dist, 0.0, atol=DISTANCE_ATOL)] = 0.0
    iu = np.triu_indices(len(cats), k=1)
    same = cats[iu[0]] == cats[iu[1]]
    pairs = dist[iu]
    intra = float(pairs[same].mean())
    inter = float(pairs[~same].mean())
    ratio = 0.0 if inter <= DISTANCE_ATOL else intra / inter
    return {"intra_mean": intra, "inter_mean": inter, "ratio": ratio}


@dataclass
class NearestToken:
    row: int
    token: str
    token_id: int
    similarity: float


def nearest_tokens(prompts, reference: np.ndarray, reference_ids: Sequence[int], vocab: Optional[Vocabulary] = None,
                   top_k: int = 1) -> List[List[NearestToken]]:
    """For each prompt row, the ``top_k`` reference rows by cosine similarity.

    ``reference`` rows are indexed by ``reference_ids``; ties go to the lower id.
    """
    mat = prompts.matrix.data if isinstance(prompts, PromptVectors) else np.asarray(prompts, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    ref_ids = np.asarray(list(reference_ids), dtype=np.int64)
    if ref.shape[0] == 0:
        raise ValueError("reference set is empty")
    if ref.shape[0] != len(ref_ids):
        raise ValueError(f"{ref.shape[0]} reference rows for {len(ref_ids)} ids")
    # dedupe and sort by id so the stable sort breaks ties by lower id
    uniq, first = np.unique(ref_ids, return_index=True)
    ref, ref_ids = ref[first], uniq

    def unit(a):
        n = np.linalg.norm(a, axis=-1, keepdims=True)
        return np.divide(a, n, out=np.zeros_like(a), where=n > 0)

    sims = np.clip(unit(mat) @ unit(ref).T, -1.0, 1.0)
    out = []
    for r, row in enumerate(sims):
        best = np.argsort(-row, kind="stable")[:top_k]
        out.append([NearestToken(row=r, token=vocab.tokens[ref_ids[j]] if vocab else str(int(ref_ids[j])),
                                 token_id=int(ref_ids[j]), similarity=float(row[j])) for j in best])
    return out


# sentence embeddings

def plm_sentence_embeddings(backbone: Transformer, instances: Sequence[LabeledInstance]) -> np.ndarray:
    """Mean-pooled final-layer states of each plain input."""
    return np.stack([backbone.encode(inst.token_ids) for inst in instances])


def prompt_sentence_embeddings(strategy, instances: Sequence[LabeledInstance]) -> np.ndarray:
    """Mean of each instance's generated prompt rows."""
    return np.stack([strategy.prompts(inst).matrix.data.mean(axis=0) for inst in instances])


def sample_indices(n: int, size: int = 4000, seed: int = 0) -> List[int]:
    if n <= size:
        return list(range(n))
    return sorted(int(i) for i in np.random.default_rng(seed).choice(n, size=size, replace=False))


# case study

@dataclass
class CaseStudyEntry:
    instance_id: str
    tokens: List[str]
    gold: str
    predicted: str
    input_nearest: List[NearestToken] = field(default_factory=list)
    vocab_nearest: List[NearestToken] = field(default_factory=list)


@dataclass
class CaseStudyReport:
    strategy: str
    entries: List[CaseStudyEntry]


def case_study(strategy, instances: Sequence[LabeledInstance], spec: TaskSpec, vocab: Vocabulary) -> CaseStudyReport:
    """Prediction plus nearest instance token and nearest vocabulary token per prompt row."""
    backbone = strategy.backbone
    emb = backbone.tok_emb.data
    cand = spec.verbalizer_ids(vocab)
    entries = []
    for inst in instances:
        pv = strategy.prompts(inst)
        logits = backbone.cloze_logits(strategy.prompted_input(inst), cand).data
        ids = list(inst.token_ids)
        entries.append(CaseStudyEntry(
            instance_id=inst.id,
            tokens=vocab.decode(ids),
            gold=spec.labels[inst.label_id],
            predicted=spec.labels[int(np.argmax(logits))],
            input_nearest=[r[0] for r in nearest_tokens(pv, emb[ids], ids, vocab)],
            vocab_nearest=[r[0] for r in nearest_tokens(pv, emb, range(len(vocab)), vocab)],
        ))
    return CaseStudyReport(strategy=strategy.name, entries=entries)


def render_case_study(reports: Sequence[CaseStudyReport]) -> str:
    """Markdown: per instance, the input with nearest tokens in bold, then one table per strategy."""
    lines = ["# Case study", ""]
    if not reports or not reports[0].entries:
        return "\n".join(lines + ["No instances."]) + "\n"
    for i, entry in enumerate(reports[0].entries):
        lines.append(f"## Instance {entry.instance_id} (gold: {entry.gold})")
        lines.append("")
        for report in reports:
            e = report.entries[i]
            text = " ".join(_mark(e))
            lines.append(f"### {report.strategy}: predicted `{e.predicted}`")
            lines.append("")
            lines.append(f"> {text}")
            lines.append("")
            lines.append("| row | nearest input token | cos | nearest vocab token | cos |")
            lines.append("|---:|---|---:|---|---:|")
            for a, b in zip(e.input_nearest, e.vocab_nearest):
                lines.append(f"| {a.row} | {a.token} | {a.similarity:.3f} | {b.token} | {b.similarity:.3f} |")
            lines.append("")
    return "\n".join(lines) + "\n"


def _mark(entry: CaseStudyEntry) -> List[str]:
    names = {n.token for n in entry.input_nearest}
    return [f"**{w}**" if w in names else w for w in entry.tokens]


# files

def write_projection_csv(path: str, projections: Dict[str, Projection2D]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["space", "id", "category", "x", "y"])
        for space, proj in projections.items():
            for x, y, c, i in proj.points():
                writer.writerow([space, i, c, f"{x:.10g}", f"{y:.10g}"])


def write_scatter_svg(path: str, projections: Dict[str, Projection2D]) -> None:
    """One panel per projection, one color per category."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(projections), figsize=(6 * len(projections), 5), squeeze=False)
    for ax, (title, proj) in zip(axes[0], projections.items()):
        cats = sorted(set(proj.categories))
        cmap = plt.get_cmap("tab20", max(len(cats), 1))
        for ci, cat in enumerate(cats):
            mask = np.asarray([c == cat for c in proj.categories])
            ax.scatter(proj.coords[mask, 0], proj.coords[mask, 1], s=8, alpha=0.7, color=cmap(ci), label=cat)
        ev = proj.explained
        ax.set_title(title)
        ax.set_xlabel(f"PC1 ({ev[0]:.1%})")
        ax.set_ylabel(f"PC2 ({ev[1]:.1%})" if len(ev) > 1 else "PC2")
        ax.legend(fontsize=6, markerscale=2)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    log.info(f"Wrote {path}")
