"""Run-directory orchestration of the pipeline stages used by the CLI.

A run directory collects every artifact of one scene:

    scene.json, poses.json      scene specification and camera trajectory
    teacher/                    teacher renders (tensor directory)
    frames.json                 supervision frame selection
    fieldset/, segfield/        fitted field checkpoints
    graph.json                  segment hierarchy
    prompt.json                 scene prompt
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config_loader import get_config
from errors import InvalidArgumentError
from processors.backend import (GroundingConfig, StructuredQuery, answer_oracle, export_segmentation_pointcloud,
                                ground, label_points, remote_answer, write_ply)
from processors.cache_manager import TeacherCache
from processors.decomp import DecompConfig, SceneDecomposer, SegmentGraph
from processors.describe import DescribeConfig, SceneDescriber, ScenePrompt
from processors.fields import TrainConfig, fit_token_field, init_fields, load_fieldset, save_fieldset
from processors.frames import (FrameConfig, bounds_diagonal, dissimilarity_matrix, filter_blurred,
                               min_pairwise_dissimilarity, select_frames, uniform_stride)
from processors.metrics import ari, grounding_summary, iou, semantic_scores
from processors.oracle import OracleFieldSet, OracleSegmentModel, oracle_graph
from processors.scenegen import (SCALES, SceneSpec, TeacherOutputs, build_scene, load_poses, make_trajectory,
                                 preset_scene, render_teacher_views, save_poses, save_previews)
from processors.segfield import (SegTrainConfig, SegmentModel, fit_seg_field, init_seg_field, load_segfield,
                                 save_segfield)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    """Artifact locations of a run; `overrides` maps an artifact name to an explicit path."""

    root: Path
    overrides: Dict[str, Path] = field(default_factory=dict)

    def _path(self, name: str, default: str) -> Path:
        return Path(self.overrides[name]) if self.overrides.get(name) else self.root / default

    @property
    def scene(self) -> Path:
        return self._path('scene', 'scene.json')

    @property
    def poses(self) -> Path:
        return self._path('poses', 'poses.json')

    @property
    def teacher(self) -> Path:
        return self._path('teacher', 'teacher')

    @property
    def frames(self) -> Path:
        return self._path('frames', 'frames.json')

    @property
    def fieldset(self) -> Path:
        return self._path('fieldset', 'fieldset')

    @property
    def segfield(self) -> Path:
        return self._path('segfield', 'segfield')

    @property
    def graph(self) -> Path:
        return self._path('graph', 'graph.json')

    @property
    def prompt(self) -> Path:
        return self._path('prompt', 'prompt.json')

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} is missing; run `{produced_by}` first")
        return path


class SceneRun:
    """Loads and stores the artifacts of one run directory."""

    def __init__(self, root, config=None, paths: Dict[str, Path] = None):
        self.paths = RunPaths(Path(root), {k: Path(v) for k, v in (paths or {}).items() if v})
        self.config = config or get_config()
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def spec(self) -> SceneSpec:
        return SceneSpec.load(self.paths.require(self.paths.scene, 'gen-scene'))

    def oracle(self):
        return build_scene(self.spec(), self.config)

    def poses(self):
        return load_poses(self.paths.require(self.paths.poses, 'gen-scene'))

    def teacher(self) -> TeacherOutputs:
        return TeacherOutputs.load(self.paths.require(self.paths.teacher, 'gen-scene'))

    def feature_views(self) -> Optional[List[int]]:
        if not self.paths.frames.exists():
            return None
        return json.loads(self.paths.frames.read_text(encoding='utf-8'))['feature_views']

    def supervision_poses(self):
        poses = self.poses()
        views = self.feature_views()
        return poses if views is None else [poses[v] for v in views]

    def fields(self, oracle: bool = False):
        if oracle:
            return OracleFieldSet(self.oracle(), int(self.config.get('render.samples_per_ray', 64)))
        return load_fieldset(self.paths.require(self.paths.fieldset, 'train'))

    def segments(self, source: str, fields=None):
        """Segment model matching a graph's `segments` source (`oracle` or `fitted`)."""
        if source == 'oracle':
            return OracleSegmentModel(self.oracle())
        geometry = fields if fields is not None and not isinstance(fields, OracleFieldSet) else self.fields()
        return SegmentModel(load_segfield(self.paths.require(self.paths.segfield, 'train --with-segfield')), geometry)

    def graph(self) -> SegmentGraph:
        return SegmentGraph.load(self.paths.require(self.paths.graph, 'segment'))

    def prompt(self, path=None) -> ScenePrompt:
        path = Path(path) if path else self.paths.require(self.paths.prompt, 'describe')
        return ScenePrompt.from_json(path.read_bytes())


def generate_scene(out_dir, preset: str = None, scene_file=None, n_views: int = None, static: bool = False,
                   previews: bool = True, config=None) -> Dict:
    """Write scene, trajectory and (cached) teacher renders into a run directory."""
    config = config or get_config()
    run = SceneRun(out_dir, config)
    if scene_file:
        spec = SceneSpec.load(scene_file)
    else:
        spec = preset_scene(preset or 'two-objects', seed=int(config.get('scene.seed', 0)),
                            view_dependent=not static, config=config)
    oracle = build_scene(spec, config)
    poses = make_trajectory(spec, n_views or int(config.get('scene.n_views', 48)), config)

    cache = TeacherCache(config=config)
    settings = {k: config.get(f'scene.{k}') for k in
                ('token_grid', 'mask_erosion', 'mask_erosion_iterations', 'density_inside', 'sibling_label_cosine')}
    key = cache.generate_cache_key(spec, poses, settings)
    teacher = cache.get_cached_teacher(key)
    if teacher is None:
        teacher = render_teacher_views(oracle, poses, config)
        cache.save_cached_teacher(key, teacher)

    spec.save(run.paths.scene)
    save_poses(poses, run.paths.poses)
    teacher.save(run.paths.teacher)
    if previews:
        save_previews(teacher, run.paths.root / 'previews')
    logger.info(f"Scene with {len(spec.objects)} objects and {len(poses)} views written to {run.paths.root}")
    return {'objects': len(spec.objects), 'views': len(poses), 'cache_key': key}


def choose_frames(run_dir, k: int = None, config=None, beta: float = None, paths: Dict[str, Path] = None) -> Dict:
    """Pick k supervision views by greedy pose coverage and write the selection.

    Views come from the teacher renders after blur filtering, or, when `paths`
    names a `poses` file, straight from that trajectory without blur filtering.
    Translation is normalized by the diagonal of the scene bounds.
    """
    config = config or get_config()
    run = SceneRun(run_dir, config, paths)
    cfg = FrameConfig.from_config(config, beta=beta)
    if 'poses' in run.paths.overrides:
        all_poses = run.poses()
        kept = list(range(len(all_poses)))
    else:
        teacher = run.teacher()
        all_poses = teacher.poses
        kept = filter_blurred(list(teacher.rgb), cfg.blur_fraction, cfg.border_crop)
    poses = [all_poses[i] for i in kept]
    k = min(k or cfg.feature_views, len(poses))
    diag = bounds_diagonal(run.spec().bounds)
    matrix = dissimilarity_matrix(poses, diag, cfg.beta)
    picked = select_frames(poses, k, diag, cfg.beta, matrix=matrix)
    baseline = uniform_stride(len(poses), k)
    result = {
        'feature_views': [kept[i] for i in picked],
        'kept': kept,
        'min_dissimilarity': min_pairwise_dissimilarity(matrix, picked),
        'uniform_min_dissimilarity': min_pairwise_dissimilarity(matrix, baseline),
        'diagonal': diag,
        'beta': cfg.beta,
    }
    run.paths.frames.parent.mkdir(parents=True, exist_ok=True)
    run.paths.frames.write_text(json.dumps(result, indent=2), encoding='utf-8')
    logger.info(f"Selected {k} of {len(all_poses)} views (min dissimilarity {result['min_dissimilarity']:.4f}, "
                f"uniform stride {result['uniform_min_dissimilarity']:.4f})")
    return result


def train_fields(run_dir, with_segfield: bool = False, steps: int = None, seg_steps: int = None,
                 progress: bool = True, config=None) -> Dict:
    """Fit the token field (and optionally the segment field) and save checkpoints plus loss curves."""
    config = config or get_config()
    run = SceneRun(run_dir, config)
    spec = run.spec()
    teacher = run.teacher()
    cfg = TrainConfig.from_config(config, steps=steps)
    fs = init_fields(cfg, spec.bounds, spec.token_dim)
    fs, curve = fit_token_field(fs, teacher, cfg, run.feature_views(), progress)
    save_fieldset(fs, run.paths.fieldset)
    curve.to_csv(run.paths.root / 'loss_curve.csv', index=False)
    summary = {'token_steps': len(curve), 'final_loss': float(curve['total'].iloc[-1])}

    if with_segfield:
        seg_cfg = SegTrainConfig.from_config(config, steps=seg_steps)
        sf = init_seg_field(seg_cfg, spec.bounds, spec.label_dim)
        sf, seg_curve = fit_seg_field(sf, teacher, seg_cfg, fs, run.feature_views(), progress)
        save_segfield(sf, run.paths.segfield)
        seg_curve.to_csv(run.paths.root / 'seg_loss_curve.csv', index=False)
        summary.update({'seg_steps': len(seg_curve), 'final_seg_loss': float(seg_curve['total'].iloc[-1])})
    return summary


def segment_scene(run_dir, oracle: bool = False, ground_truth: bool = False, config=None,
                  paths: Dict[str, Path] = None) -> SegmentGraph:
    """Cluster segment embeddings into the hierarchy and write `graph.json`.

    `oracle` clusters the analytic segment embeddings; `ground_truth` skips
    clustering and writes the scene's own hierarchy.

    `paths` may redirect `fieldset`, `segfield` and the output `graph`.
    """
    config = config or get_config()
    run = SceneRun(run_dir, config, paths)
    if ground_truth:
        scene = run.oracle()
        graph = oracle_graph(scene, OracleSegmentModel(scene))
    else:
        segments = run.segments('oracle' if oracle else 'fitted')
        graph = SceneDecomposer(DecompConfig.from_config(config)).decompose(segments, run.supervision_poses()).graph
    graph.metadata['segments'] = 'oracle' if (oracle or ground_truth) else 'fitted'
    graph.save(run.paths.graph)
    logger.info("Segment graph: " + ", ".join(f"{len(graph.ids(s))} {s}" for s in SCALES))
    return graph


def describe_scene(run_dir, question: str = '', budget: int = None, mode: str = None, oracle: bool = False,
                   config=None, paths: Dict[str, Path] = None):
    """Build and save the scene prompt plus a per-object description table.

    `paths` may redirect `graph`, `fieldset`, `segfield` and the output `prompt`.
    """
    config = config or get_config()
    run = SceneRun(run_dir, config, paths)
    graph = run.graph()
    fields = run.fields(oracle)
    segments = run.segments(graph.metadata.get('segments', 'fitted'), fields)
    cfg = DescribeConfig.from_config(config, budget=budget, vi_vd_mode=mode)
    result = SceneDescriber(cfg).describe(fields, segments, graph, run.supervision_poses(), question)
    run.paths.prompt.parent.mkdir(parents=True, exist_ok=True)
    run.paths.prompt.write_bytes(result.prompt.to_json_bytes())
    graph.save(run.paths.graph)
    pd.DataFrame([{
        'object_id': d.object_id,
        'tokens': len(d.tokens),
        'quota': d.quota,
        'fill_ratio': d.fill_ratio,
        'vi_tokens': sum(1 for t in d.tokens if t.tag == 'VI'),
        'rays_cast': d.rays_cast,
        'flags': ';'.join(d.flags),
    } for d in result.descriptions]).to_csv(run.paths.root / 'descriptions.csv', index=False)
    return result


def ask(prompt: ScenePrompt, query: Optional[StructuredQuery] = None, remote: bool = False, endpoint: str = None,
        timeout: float = None, config=None) -> Dict:
    """Answer a prompt with the oracle backend or a remote endpoint."""
    config = config or get_config()
    if remote:
        outgoing = replace(prompt, query=query.model_dump(exclude_none=True)) if query is not None else prompt
        return remote_answer(outgoing, endpoint, timeout)
    if query is None:
        raise InvalidArgumentError("The oracle backend needs a structured query")
    return answer_oracle(prompt, query, bool(config.get('backend.prefer_vi', True))).to_reply()


def ground_object(run_dir, virtual_id: int, prompt_path=None, oracle: bool = False, config=None):
    """Ground one virtual image to a binary point cloud and write it as PLY."""
    config = config or get_config()
    run = SceneRun(run_dir, config)
    graph = run.graph()
    fields = run.fields(oracle)
    segments = run.segments(graph.metadata.get('segments', 'fitted'), fields)
    result = ground(graph, fields, segments, virtual_id, run.prompt(prompt_path), run.supervision_poses(),
                    GroundingConfig.from_config(config))
    write_ply(run.paths.root / f'grounding_{virtual_id}.ply', result.points, result.labels.astype(np.int64))
    return result


def match_segments(segment_ids: np.ndarray, truth: np.ndarray) -> Dict[int, int]:
    """Scene object covering most points of each segment (lowest object id on ties)."""
    matched = {}
    for segment in np.unique(segment_ids):
        covered = truth[(segment_ids == segment) & (truth >= 0)]
        if len(covered):
            values, counts = np.unique(covered, return_counts=True)
            matched[int(segment)] = int(values[np.argmax(counts)])
    return matched


def evaluate(run_dir, n_queries: int = 50, oracle: bool = False, seed: int = None, config=None) -> Tuple[pd.DataFrame, Dict]:
    """Grounding accuracy, object-scale ARI and semantic scores for one run.

    Grounding queries use an object's base token as the query feature and score
    the returned point set against the analytic object labels.
    """
    config = config or get_config()
    run = SceneRun(run_dir, config)
    scene = run.oracle()
    spec = run.spec()
    graph = run.graph()
    prompt = run.prompt()
    fields = run.fields(oracle)
    segments = run.segments(graph.metadata.get('segments', 'fitted'), fields)
    poses = run.supervision_poses()
    grounding_cfg = GroundingConfig.from_config(config)
    thresholds = [float(t) for t in config.get_list('eval.iou_thresholds', [0.1, 0.25])]

    points, point_ids, _ = label_points(fields, segments, graph, poses, grounding_cfg)
    truth = scene.object_at(points)
    matched = match_segments(point_ids, truth)
    rng = np.random.default_rng(int(seed if seed is not None else config.get('scene.seed', 0)))
    rows, ious = [], []
    for q in range(n_queries):
        target = spec.objects[int(rng.integers(0, len(spec.objects)))]
        query = StructuredQuery(kind='find_object_by_feature', embedding=list(target.base_token))
        answer = answer_oracle(prompt, query, bool(config.get('backend.prefer_vi', True)))
        score = iou(point_ids == answer.object_id, truth == target.id)
        ious.append(score)
        rows.append({'query': q, 'target': target.id, 'predicted_segment': answer.object_id,
                     'correct': matched.get(answer.object_id) == target.id, 'iou': score.value})
    table = pd.DataFrame(rows)
    summary = grounding_summary(ious, thresholds)
    summary['choice_accuracy'] = float(table['correct'].mean())

    visible = truth >= 0
    summary['object_ari'] = ari(point_ids[visible], truth[visible]) if visible.any() else float('nan')

    classes = {o.id: o.class_label for o in spec.objects}
    object_ids = sorted(classes)
    dictionary = np.stack([scene.label_tables['large'][i] for i in object_ids])
    for scale in (*SCALES, 'all'):
        cloud = export_segmentation_pointcloud(graph, fields, segments, poses, dictionary, scale, grounding_cfg)
        cloud_truth = scene.object_at(cloud.points)
        keep = cloud_truth >= 0
        if not keep.any():
            continue
        pred = np.array([classes[object_ids[i]] for i in cloud.labels[keep]])
        gt = np.array([classes[int(i)] for i in cloud_truth[keep]])
        scores = semantic_scores(pred, gt)
        summary[f'miou_{scale}'] = scores.miou
        summary[f'macc_{scale}'] = scores.macc
    logger.info(f"Evaluation over {len(points)} surface points: " +
                ", ".join(f"{k}={v:.3f}" for k, v in summary.items() if isinstance(v, float)))

    table.to_csv(run.paths.root / 'eval_queries.csv', index=False)
    (run.paths.root / 'eval.json').write_text(json.dumps(summary, indent=2), encoding='utf-8')
    return table, summary
