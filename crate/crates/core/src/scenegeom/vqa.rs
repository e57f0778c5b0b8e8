//! Templated spatial question/answer generation with 3D tokens.
//!
//! Every record stores the unquantized values behind its answer so that
//! [`verify_pair`] can recompute the geometry from the scene and check it.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    backproject, bbox_vertex_distances, compare_depth_clouds, filter_duplicates, keypoints, object_distance,
    order_vertices, oriented_bbox, remove_outliers, Intrinsics, OrientedBox3D, PointMap, SceneError, SceneObject,
    DEFAULT_NEIGHBORS, DEFAULT_STD_RATIO,
};
use crate::so3::Vec3;
use crate::tokenizer3d::{render_tokens, TokenVocab3D};

/// Bumped whenever the vertex-ordering rule or answer layout changes.
pub const VQA_FORMAT_VERSION: u32 = 1;
pub const MAX_PAIRS_PER_SCENE: usize = 4;

#[derive(Debug, Clone)]
pub struct Scene {
    pub point_map: PointMap,
    pub intrinsics: Intrinsics,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Keypoints,
    BoundingBox,
    ObjectDistance,
    ObjectBoxDistance,
    Backprojection,
    DepthComparison,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Keypoints,
        TaskKind::BoundingBox,
        TaskKind::ObjectDistance,
        TaskKind::ObjectBoxDistance,
        TaskKind::Backprojection,
        TaskKind::DepthComparison,
    ];

    /// Number of objects the template refers to.
    pub fn arity(self) -> usize {
        match self {
            TaskKind::Keypoints | TaskKind::BoundingBox | TaskKind::Backprojection => 1,
            _ => 2,
        }
    }

    /// Number of 3D tokens in the answer.
    pub fn token_count(self) -> usize {
        match self {
            TaskKind::Keypoints => 9,
            TaskKind::BoundingBox => 24,
            TaskKind::ObjectDistance => 4,
            TaskKind::ObjectBoxDistance => 27,
            TaskKind::Backprojection => 0,
            TaskKind::DepthComparison => 2,
        }
    }

    fn needs_box(self) -> bool {
        matches!(
            self,
            TaskKind::BoundingBox | TaskKind::ObjectBoxDistance | TaskKind::Backprojection
        )
    }
}

/// Question and answer wording. `{a}` and `{b}` are object labels, `{answer}`
/// is the rendered token string (or pixel list), `{closer}` the depth winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaTemplates {
    pub keypoints_q: String,
    pub keypoints_a: String,
    pub bbox_q: String,
    pub bbox_a: String,
    pub distance_q: String,
    pub distance_a: String,
    pub box_distance_q: String,
    pub box_distance_a: String,
    pub backprojection_q: String,
    pub backprojection_a: String,
    pub depth_q: String,
    pub depth_a: String,
}

impl Default for VqaTemplates {
    fn default() -> Self {
        Self {
            keypoints_q: "What are the coordinates of the closest, furthest and center points of the {a}?".into(),
            keypoints_a: "The closest, furthest and center points of the {a} are {answer}.".into(),
            bbox_q: "What is the oriented 3D bounding box of the {a}?".into(),
            bbox_a: "The 8 vertices of the {a} bounding box are {answer}.".into(),
            distance_q: "What is the distance between the {a} and the {b}, and its xyz components?".into(),
            distance_a: "The offset from the {a} to the {b} is {answer}.".into(),
            box_distance_q: "What is the distance between the bounding box vertices and the centers of the {a} and the {b}?"
                .into(),
            box_distance_a: "The vertex offsets and center offset from the {a} to the {b} are {answer}.".into(),
            backprojection_q: "Where are the bounding box vertices of the {a} on the 2D image?".into(),
            backprojection_a: "The vertices of the {a} project to {answer}.".into(),
            depth_q: "Which object is closer to the camera, the {a} or the {b}?".into(),
            depth_a: "The {a} is at {da} and the {b} is at {db}, so the {closer} is closer.".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaPair {
    pub task_kind: TaskKind,
    pub objects: Vec<String>,
    pub question: String,
    pub answer: String,
    pub tokens: Vec<usize>,
    /// Unquantized values, in token order. Backprojection stores pixel pairs.
    pub ground_truth: Vec<f64>,
    /// Label of the closer object for depth questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closer: Option<String>,
}

/// Per-object geometry shared by all templates.
#[derive(Debug, Clone)]
pub struct ObjectGeometry {
    pub label: String,
    /// Outlier-free cloud (the raw cloud when too small to filter).
    pub cloud: Vec<Vec3>,
    pub bbox: Option<OrientedBox3D>,
}

pub fn object_geometry(obj: &SceneObject) -> ObjectGeometry {
    let cloud = if obj.cloud.len() > DEFAULT_NEIGHBORS {
        remove_outliers(&obj.cloud, DEFAULT_NEIGHBORS, DEFAULT_STD_RATIO).unwrap_or_else(|_| obj.cloud.clone())
    } else {
        obj.cloud.clone()
    };
    let bbox = oriented_bbox(&cloud).ok();
    ObjectGeometry {
        label: obj.label.clone(),
        cloud,
        bbox,
    }
}

/// Values behind an answer, before quantization.
fn answer_values(
    kind: TaskKind,
    objs: &[&ObjectGeometry],
    k: &Intrinsics,
) -> Result<(Vec<f64>, Option<String>), SceneError> {
    let flat = |vs: &[Vec3]| vs.iter().flat_map(|v| v.iter().copied()).collect::<Vec<f64>>();
    let bbox = |o: &ObjectGeometry| o.bbox.ok_or_else(|| SceneError::DegenerateCloud(o.label.clone()));
    Ok(match kind {
        TaskKind::Keypoints => {
            let kp = keypoints(&objs[0].cloud)?;
            (flat(&[kp.closest, kp.furthest, kp.center]), None)
        }
        TaskKind::BoundingBox => (flat(&order_vertices(&bbox(objs[0])?)), None),
        TaskKind::ObjectDistance => {
            let d = object_distance(&objs[0].cloud, &objs[1].cloud)?;
            let mut v = d.components.to_vec();
            v.push(d.direct);
            (v, None)
        }
        TaskKind::ObjectBoxDistance => {
            let off = bbox_vertex_distances(&bbox(objs[0])?, &bbox(objs[1])?);
            let mut v = flat(&off.vertices);
            v.extend(off.center);
            (v, None)
        }
        TaskKind::Backprojection => {
            let px = backproject(&order_vertices(&bbox(objs[0])?), k)?;
            (px.iter().flat_map(|p| p.iter().copied()).collect(), None)
        }
        TaskKind::DepthComparison => {
            let c = compare_depth_clouds(&objs[0].label, &objs[0].cloud, &objs[1].label, &objs[1].cloud)?;
            (vec![c.dist_a, c.dist_b], Some(c.closer))
        }
    })
}

fn fill(t: &str, a: &str, b: &str) -> String {
    t.replace("{a}", a).replace("{b}", b)
}

fn build_pair(
    kind: TaskKind,
    objs: &[&ObjectGeometry],
    k: &Intrinsics,
    vocab: &TokenVocab3D,
    tpl: &VqaTemplates,
) -> Result<VqaPair, SceneError> {
    let (ground_truth, closer) = answer_values(kind, objs, k)?;
    let tokens: Vec<usize> = if kind == TaskKind::Backprojection {
        Vec::new()
    } else {
        ground_truth.iter().map(|v| vocab.encode(*v)).collect()
    };
    let a = objs[0].label.as_str();
    let b = objs.get(1).map_or("", |o| o.label.as_str());
    let (q, ans) = match kind {
        TaskKind::Keypoints => (&tpl.keypoints_q, &tpl.keypoints_a),
        TaskKind::BoundingBox => (&tpl.bbox_q, &tpl.bbox_a),
        TaskKind::ObjectDistance => (&tpl.distance_q, &tpl.distance_a),
        TaskKind::ObjectBoxDistance => (&tpl.box_distance_q, &tpl.box_distance_a),
        TaskKind::Backprojection => (&tpl.backprojection_q, &tpl.backprojection_a),
        TaskKind::DepthComparison => (&tpl.depth_q, &tpl.depth_a),
    };
    let mut answer = fill(ans, a, b);
    match kind {
        TaskKind::Backprojection => {
            let px: Vec<String> = ground_truth
                .chunks(2)
                .map(|p| format!("({}, {})", p[0].round() as i64, p[1].round() as i64))
                .collect();
            answer = answer.replace("{answer}", &px.join(", "));
        }
        TaskKind::DepthComparison => {
            answer = answer
                .replace("{da}", &render_tokens(&tokens[..1]))
                .replace("{db}", &render_tokens(&tokens[1..]))
                .replace("{closer}", closer.as_deref().unwrap_or_default());
        }
        _ => answer = answer.replace("{answer}", &render_tokens(&tokens)),
    }
    Ok(VqaPair {
        task_kind: kind,
        objects: objs.iter().map(|o| o.label.clone()).collect(),
        question: fill(q, a, b),
        answer,
        tokens,
        ground_truth,
        closer,
    })
}

/// Candidate object tuples for `kind`, as indices into `geo`.
fn candidates(kind: TaskKind, geo: &[ObjectGeometry]) -> Vec<Vec<usize>> {
    let usable = |i: usize| {
        let g = &geo[i];
        match (kind.needs_box(), g.bbox) {
            (false, _) => true,
            (true, None) => false,
            (true, Some(b)) => kind != TaskKind::Backprojection || b.vertices().iter().all(|v| v[2] > 1e-6),
        }
    };
    let ok: Vec<usize> = (0..geo.len()).filter(|i| usable(*i)).collect();
    if kind.arity() == 1 {
        ok.into_iter().map(|i| vec![i]).collect()
    } else {
        let mut out = Vec::new();
        for &i in &ok {
            for &j in &ok {
                if i != j {
                    out.push(vec![i, j]);
                }
            }
        }
        out
    }
}

/// Draws between 1 and 4 question/answer pairs for one scene.
///
/// Objects whose label occurs more than once are never asked about. For each
/// pair a task kind is drawn uniformly among those the remaining objects can
/// support, then an object tuple uniformly among the valid ones.
pub fn generate_vqa<R: Rng + ?Sized>(
    scene: &Scene,
    vocab: &TokenVocab3D,
    templates: &VqaTemplates,
    rng: &mut R,
) -> Result<Vec<VqaPair>, SceneError> {
    let objects = filter_duplicates(scene.objects.clone());
    if objects.is_empty() {
        return Err(SceneError::NoObjects);
    }
    let geo: Vec<ObjectGeometry> = objects.iter().map(object_geometry).collect();
    let options: Vec<(TaskKind, Vec<Vec<usize>>)> = TaskKind::ALL
        .iter()
        .map(|k| (*k, candidates(*k, &geo)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    if options.is_empty() {
        return Err(SceneError::NoObjects);
    }
    let n = rng.random_range(1..=MAX_PAIRS_PER_SCENE);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (kind, cands) = options.choose(rng).expect("options is non-empty");
        let idx = cands.choose(rng).expect("candidate list is non-empty");
        let objs: Vec<&ObjectGeometry> = idx.iter().map(|i| &geo[*i]).collect();
        out.push(build_pair(*kind, &objs, &scene.intrinsics, vocab, templates)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerifyError {
    #[error("object {0:?} is not uniquely present in the scene")]
    UnknownObject(String),
    #[error("{kind:?} answer has {got} tokens, template arity is {expected}")]
    TokenCount { kind: TaskKind, expected: usize, got: usize },
    #[error("ground truth differs from recomputed geometry at value {index}: {stored} vs {recomputed}")]
    GroundTruth { index: usize, stored: f64, recomputed: f64 },
    #[error("token {index} is {got}, expected {expected}")]
    Token { index: usize, expected: usize, got: usize },
    #[error("answer text does not carry the token string")]
    AnswerText,
    #[error("depth winner mismatch")]
    Closer,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Recomputes a record from the scene and checks every stored value.
pub fn verify_pair(scene: &Scene, vocab: &TokenVocab3D, pair: &VqaPair) -> Result<(), VerifyError> {
    if pair.tokens.len() != pair.task_kind.token_count() {
        return Err(VerifyError::TokenCount {
            kind: pair.task_kind,
            expected: pair.task_kind.token_count(),
            got: pair.tokens.len(),
        });
    }
    let objects = filter_duplicates(scene.objects.clone());
    let geo: Vec<ObjectGeometry> = pair
        .objects
        .iter()
        .map(|l| {
            objects
                .iter()
                .find(|o| &o.label == l)
                .map(object_geometry)
                .ok_or_else(|| VerifyError::UnknownObject(l.clone()))
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&ObjectGeometry> = geo.iter().collect();
    let (values, closer) = answer_values(pair.task_kind, &refs, &scene.intrinsics)?;
    if values.len() != pair.ground_truth.len() {
        return Err(VerifyError::TokenCount {
            kind: pair.task_kind,
            expected: values.len(),
            got: pair.ground_truth.len(),
        });
    }
    for (i, (s, r)) in pair.ground_truth.iter().zip(&values).enumerate() {
        if (s - r).abs() > 1e-9 * (1.0 + r.abs()) {
            return Err(VerifyError::GroundTruth {
                index: i,
                stored: *s,
                recomputed: *r,
            });
        }
    }
    for (i, (t, v)) in pair.tokens.iter().zip(&pair.ground_truth).enumerate() {
        let expected = vocab.encode(*v);
        if *t != expected {
            return Err(VerifyError::Token {
                index: i,
                expected,
                got: *t,
            });
        }
    }
    if !pair.tokens.is_empty() && !pair.answer.contains(&render_tokens(&pair.tokens[..1])) {
        return Err(VerifyError::AnswerText);
    }
    if closer != pair.closer {
        return Err(VerifyError::Closer);
    }
    Ok(())
}

/// One JSON object per line.
pub fn to_jsonl(pairs: &[VqaPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p).expect("record serializes"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegeom::synthetic::{render_scene, BoxSpec};
    use crate::seeding;
    use crate::so3::Quaternion;
    use crate::tokenizer3d::fit_vocab;

    fn scene(labels: &[&str]) -> Scene {
        let boxes: Vec<BoxSpec> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| BoxSpec {
                label: l.to_string(),
                center: [-0.5 + 0.5 * i as f64, 0.1, 2.0 + 0.2 * i as f64],
                rotation: Quaternion::from_axis_angle([0.3, 1.0, 0.2], 0.4 + 0.3 * i as f64),
                extents: [0.3, 0.2, 0.25],
            })
            .collect();
        render_scene(64, 48, &boxes)
    }

    fn vocab() -> TokenVocab3D {
        let vals: Vec<f64> = (0..4001).map(|i| -3.0 + 6.0 * i as f64 / 4000.0).collect();
        fit_vocab(&vals, 256).unwrap()
    }

    #[test]
    fn single_object_only_single_templates() {
        let s = scene(&["mug"]);
        let v = vocab();
        for seed in 0..20 {
            let pairs = generate_vqa(&s, &v, &VqaTemplates::default(), &mut seeding::rng(seed)).unwrap();
            assert!((1..=4).contains(&pairs.len()));
            for p in &pairs {
                assert_eq!(p.task_kind.arity(), 1);
                verify_pair(&s, &v, p).unwrap();
            }
        }
    }

    #[test]
    fn duplicates_only_scene_has_no_objects() {
        let s = scene(&["cup", "cup"]);
        assert_eq!(
            generate_vqa(&s, &vocab(), &VqaTemplates::default(), &mut seeding::rng(0)),
            Err(SceneError::NoObjects)
        );
    }

    #[test]
    fn multi_object_records_verify_and_are_deterministic() {
        let s = scene(&["mug", "bowl", "plate"]);
        let v = vocab();
        let run = |seed| generate_vqa(&s, &v, &VqaTemplates::default(), &mut seeding::rng(seed)).unwrap();
        let mut kinds = std::collections::HashSet::new();
        for seed in 0..40 {
            let pairs = run(seed);
            for p in &pairs {
                verify_pair(&s, &v, p).unwrap();
                assert_eq!(p.tokens.len(), p.task_kind.token_count());
                kinds.insert(p.task_kind);
            }
            assert_eq!(to_jsonl(&pairs), to_jsonl(&run(seed)));
        }
        assert_eq!(kinds.len(), 6);
    }

    #[test]
    fn tampered_record_fails_verification() {
        let s = scene(&["mug", "bowl"]);
        let v = vocab();
        let mut p = generate_vqa(&s, &v, &VqaTemplates::default(), &mut seeding::rng(1)).unwrap()[0].clone();
        p.ground_truth[0] += 0.1;
        assert!(verify_pair(&s, &v, &p).is_err());
    }
}
