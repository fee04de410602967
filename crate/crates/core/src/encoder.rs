//! Graph-convolutional skeleton encoder.
//!
//! Each layer projects joint features with a shared channel matrix, then
//! mixes them over the joint graph and over neighbouring frames:
//!
//! `H ← relu(Ā·(H W) + tconv(H W) + b)`
//!
//! where `Ā = D⁻¹(A + I)` and `tconv` is a depthwise temporal convolution.
//! Weights do not depend on the joint count, so one encoder serves skeletons
//! of any topology; the [`JointGraph`] is supplied per call.

use std::collections::VecDeque;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Params, Tape, Tensor, Var};
use crate::skeldata::{SkeletonSequence, TARGET_FRAMES};

#[derive(Clone, Debug, PartialEq)]
pub struct JointGraph {
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Rc<Tensor>,
}

/// Serialisable description of a [`JointGraph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointGraphSpec {
    pub joint_count: usize,
    pub edges: Vec<(usize, usize)>,
}

/// Builds `Ā = D⁻¹(A + I)` from an undirected edge list.
pub fn build_joint_graph(joint_count: usize, edges: &[(usize, usize)]) -> Result<JointGraph> {
    if joint_count == 0 {
        return Err(Error::Topology("graph has no joints".into()));
    }
    let mut a = vec![0.0; joint_count * joint_count];
    let mut neighbours = vec![Vec::new(); joint_count];
    for &(p, c) in edges {
        if p >= joint_count || c >= joint_count {
            return Err(Error::Topology(format!(
                "edge ({p}, {c}) references a joint outside 0..{joint_count}"
            )));
        }
        a[p * joint_count + c] = 1.0;
        a[c * joint_count + p] = 1.0;
        neighbours[p].push(c);
        neighbours[c].push(p);
    }
    let mut seen = vec![false; joint_count];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(n) = queue.pop_front() {
        for &m in &neighbours[n] {
            if !seen[m] {
                seen[m] = true;
                queue.push_back(m);
            }
        }
    }
    if let Some(lonely) = seen.iter().position(|s| !s) {
        return Err(Error::Topology(format!(
            "joint {lonely} is not connected to joint 0"
        )));
    }
    for i in 0..joint_count {
        a[i * joint_count + i] = 1.0;
    }
    for row in a.chunks_mut(joint_count) {
        let degree: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= degree);
    }
    Ok(JointGraph {
        joint_count,
        edges: edges.to_vec(),
        adjacency: Rc::new(Tensor::from_parts(vec![joint_count, joint_count], a)),
    })
}

impl JointGraph {
    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn spec(&self) -> JointGraphSpec {
        JointGraphSpec {
            joint_count: self.joint_count,
            edges: self.edges.clone(),
        }
    }

    pub fn from_spec(spec: &JointGraphSpec) -> Result<Self> {
        build_joint_graph(spec.joint_count, &spec.edges)
    }

    /// Graph whose adjacency is exactly `adjacency` (used to build test fixtures).
    pub fn with_adjacency(adjacency: Tensor) -> Result<Self> {
        let j = adjacency.rows();
        if adjacency.shape() != [j, j] {
            return Err(Error::Topology("adjacency must be square".into()));
        }
        Ok(Self {
            joint_count: j,
            edges: Vec::new(),
            adjacency: Rc::new(adjacency),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub layer_count: usize,
    pub temporal_kernel: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            layer_count: 3,
            temporal_kernel: 3,
            frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.layer_count == 0 {
            return Err(Error::param(
                "encoder needs at least one channel and one layer",
            ));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::param("temporal kernel width must be odd"));
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }
}

/// Encoder output `F` of shape `(T, J, C)`, stored as a `(T·J, C)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.joints, self.channels)
    }

    pub fn at(&self, t: usize, j: usize, c: usize) -> f64 {
        self.values.data()[(t * self.joints + j) * self.channels + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: Params,
}

pub fn weight_name(layer: usize) -> String {
    format!("enc.{layer}.w")
}
pub fn bias_name(layer: usize) -> String {
    format!("enc.{layer}.b")
}
pub fn kernel_name(layer: usize) -> String {
    format!("enc.{layer}.k")
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let k = config.temporal_kernel;
        let mut params = Params::new();
        for l in 0..config.layer_count {
            let c_in = if l == 0 { 3 } else { c };
            params.insert(
                weight_name(l),
                Tensor::glorot(&[c_in, c], c_in, c, &mut rng),
            );
            params.insert(kernel_name(l), Tensor::glorot(&[k, c], k, k, &mut rng));
            params.insert(bias_name(l), Tensor::zeros(&[c]));
        }
        Ok(Self { config, params })
    }

    pub fn channels(&self) -> usize {
        self.config.base_channels
    }

    /// Records the forward pass of a 64-frame sequence; returns the `(T·J, C)` output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        seq: &SkeletonSequence,
        graph: &JointGraph,
    ) -> Result<Var> {
        let t = check_input(seq, graph)?;
        let mut h = tape.constant(seq.to_tensor());
        for l in 0..self.config.layer_count {
            let hw = tape.matmul(h, bound.var(&weight_name(l)));
            let mixed = tape.graph_mix(hw, graph.adjacency.clone(), t);
            let temporal = tape.temporal_conv(hw, bound.var(&kernel_name(l)), t, graph.joint_count);
            let s = tape.add(mixed, temporal);
            let s = tape.add_row(s, bound.var(&bias_name(l)));
            h = tape.relu(s);
        }
        Ok(h)
    }

    pub fn encode(&self, seq: &SkeletonSequence, graph: &JointGraph) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let out = self.forward(&mut tape, &bound, seq, graph)?;
        Ok(FeatureMap {
            frames: seq.frame_count(),
            joints: graph.joint_count,
            channels: self.channels(),
            values: tape.value(out).clone(),
        })
    }
}

fn check_input(seq: &SkeletonSequence, graph: &JointGraph) -> Result<usize> {
    if seq.frame_count() != TARGET_FRAMES {
        return Err(Error::Precondition(format!(
            "{}: encoder expects {TARGET_FRAMES} frames, got {}",
            seq.sample_id,
            seq.frame_count()
        )));
    }
    if seq.joint_count() != graph.joint_count {
        return Err(Error::Precondition(format!(
            "{}: sequence has {} joints, graph has {}",
            seq.sample_id,
            seq.joint_count(),
            graph.joint_count
        )));
    }
    Ok(seq.frame_count())
}

const CHECKPOINT_FORMAT: &str = "emotok-encoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    /// Graphs the encoder was trained on, keyed by dataset name.
    pub graphs: Vec<(String, JointGraphSpec)>,
    pub params: Params,
}

impl EncoderCheckpoint {
    pub fn new(encoder: &Encoder, graphs: Vec<(String, JointGraphSpec)>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: encoder.config.clone(),
            graphs,
            params: encoder.params.clone(),
        }
    }

    pub fn encoder(&self) -> Encoder {
        Encoder {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheck};
    use crate::skeldata::{default_edges, resample_to_frames, synthesize_dataset, SynthProfile};

    fn small_seq(joints: usize, seed: u64) -> SkeletonSequence {
        let d =
            synthesize_dataset(&SynthProfile::custom("t", joints, &["A", "B"], 1, seed)).unwrap();
        resample_to_frames(&d.sequences[0], TARGET_FRAMES).unwrap()
    }

    #[test]
    fn chain_adjacency() {
        let g = build_joint_graph(3, &[(0, 1), (1, 2)]).unwrap();
        let third = 1.0 / 3.0;
        let expected = [0.5, 0.5, 0.0, third, third, third, 0.0, 0.5, 0.5];
        for (a, b) in g.adjacency().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacency_rows_sum_to_one_and_are_symmetric_in_support() {
        for j in [2, 24, 25, 28] {
            let g = build_joint_graph(j, &default_edges(j)).unwrap();
            let a = g.adjacency();
            for r in 0..j {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for c in 0..j {
                    assert_eq!(a.at2(r, c) > 0.0, a.at2(c, r) > 0.0);
                }
            }
        }
    }

    #[test]
    fn topology_errors() {
        assert!(matches!(
            build_joint_graph(3, &[(0, 3)]),
            Err(Error::Topology(_))
        ));
        assert!(matches!(
            build_joint_graph(3, &[(0, 1)]),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let enc = Encoder::new(EncoderConfig::default(), 1).unwrap();
        let seq = SkeletonSequence::new("z", "d", "A", 30.0, 4, vec![0.0; 64 * 4 * 3]).unwrap();
        let g = build_joint_graph(4, &default_edges(4)).unwrap();
        let f = enc.encode(&seq, &g).unwrap();
        assert!(f.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_reproduces_input() {
        let config = EncoderConfig {
            base_channels: 5,
            layer_count: 1,
            ..EncoderConfig::default()
        };
        let mut enc = Encoder::new(config, 1).unwrap();
        let mut w = Tensor::zeros(&[3, 5]);
        for i in 0..3 {
            w.data_mut()[i * 5 + i] = 1.0;
        }
        enc.params.insert(weight_name(0), w);
        enc.params.insert(kernel_name(0), Tensor::zeros(&[3, 5]));
        let positions: Vec<f64> = (0..64 * 2 * 3).map(|i| (i % 17) as f64 * 0.1).collect();
        let seq = SkeletonSequence::new("p", "d", "A", 30.0, 2, positions.clone()).unwrap();
        let g = JointGraph::with_adjacency(Tensor::identity(2)).unwrap();
        let f = enc.encode(&seq, &g).unwrap();
        for t in 0..64 {
            for j in 0..2 {
                for c in 0..3 {
                    assert_eq!(f.at(t, j, c), positions[(t * 2 + j) * 3 + c]);
                }
                assert_eq!(f.at(t, j, 3), 0.0);
            }
        }
    }

    #[test]
    fn output_shape_for_reference_joint_counts() {
        let enc = Encoder::new(EncoderConfig::default(), 3).unwrap();
        for j in [24, 25, 28] {
            let seq = small_seq(j, j as u64);
            let g = build_joint_graph(j, &default_edges(j)).unwrap();
            let f = enc.encode(&seq, &g).unwrap();
            assert_eq!(f.dims(), (64, j, 64));
            assert_eq!(f.values.shape(), [64 * j, 64]);
            assert_eq!(enc.encode(&seq, &g).unwrap(), f);
        }
    }

    #[test]
    fn rejects_wrong_frame_count() {
        let enc = Encoder::new(EncoderConfig::default(), 3).unwrap();
        let seq = SkeletonSequence::new("s", "d", "A", 30.0, 2, vec![0.1; 10 * 2 * 3]).unwrap();
        let g = build_joint_graph(2, &[(0, 1)]).unwrap();
        assert!(matches!(enc.encode(&seq, &g), Err(Error::Precondition(_))));
    }

    #[test]
    fn gradient_through_encoder_matches_finite_differences() {
        let config = EncoderConfig {
            base_channels: 4,
            layer_count: 2,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(config, 11).unwrap();
        let seq = small_seq(5, 2);
        let g = build_joint_graph(5, &default_edges(5)).unwrap();
        let loss_of = |params: &Params| {
            let mut tape = Tape::new();
            let bound = tape.bind(params, true);
            let out = enc_with(&enc, params)
                .forward(&mut tape, &bound, &seq, &g)
                .unwrap();
            let sq = tape.mul(out, out);
            let loss = tape.mean(sq);
            (tape, bound, loss)
        };
        let (tape, bound, loss) = loss_of(&enc.params);
        let grads = tape.backward(loss).for_params(&bound);
        let mut flat_grad = Params::new();
        for (name, g) in grads {
            flat_grad.insert(name, g);
        }
        let report = finite_diff_check(
            |p| {
                let mut params = enc.params.clone();
                params.unflatten(p).unwrap();
                let (tape, _, loss) = loss_of(&params);
                tape.scalar(loss)
            },
            &enc.params.flatten(),
            &flat_grad.flatten(),
            &GradCheck::default(),
        );
        assert!(report.passed, "{report:?}");
    }

    fn enc_with(enc: &Encoder, params: &Params) -> Encoder {
        Encoder {
            config: enc.config.clone(),
            params: params.clone(),
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let enc = Encoder::new(EncoderConfig::default(), 5).unwrap();
        let g = build_joint_graph(4, &default_edges(4)).unwrap();
        let ck = EncoderCheckpoint::new(&enc, vec![("x".into(), g.spec())]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        ck.save(&path).unwrap();
        let back = EncoderCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encoder(), enc);
    }
}
