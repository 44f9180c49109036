//! Decoding strategies wiring the four fused stage maps through one fusion
//! unit per stage, and the head producing the probability map.
//!
//! Stage 1 is the finest (stride 4) and stage 4 the coarsest (stride 32).
//! Units run from stage 4 down to stage 1. An edge `j -> i` feeds stage `j`
//! into the unit of stage `i` either as the raw fused map ([`EdgeKind::Raw`])
//! or as the refined unit output ([`EdgeKind::Refined`]). A unit receives its
//! inputs deepest producer first and, for one producer, raw before refined.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::encoder::{FeatureMap, NUM_STAGES};
use crate::error::{CodError, Result};
use crate::mgfu::Mgfu;
use crate::nn::{Conv2d, ConvNorm, Ctx, Hooks, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecodingStrategy {
    Progressive,
    Dense,
    Feedback,
    Separate,
    Pyramidal,
    RecursiveFeedback,
    DenseProgressive,
    DenseRecursiveFeedback,
}

impl DecodingStrategy {
    pub const ALL: [Self; 8] = [
        Self::Progressive,
        Self::Dense,
        Self::Feedback,
        Self::Separate,
        Self::Pyramidal,
        Self::RecursiveFeedback,
        Self::DenseProgressive,
        Self::DenseRecursiveFeedback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Progressive => "progressive",
            Self::Dense => "dense",
            Self::Feedback => "feedback",
            Self::Separate => "separate",
            Self::Pyramidal => "pyramidal",
            Self::RecursiveFeedback => "recursive_feedback",
            Self::DenseProgressive => "dense_progressive",
            Self::DenseRecursiveFeedback => "dense_recursive_feedback",
        }
    }
}

impl fmt::Display for DecodingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecodingStrategy {
    type Err = CodError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CodError::InvalidInput(format!("unknown decoding strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Stage(usize),
    Head,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Stage(s) => write!(f, "{s}"),
            Node::Head => f.write_str("head"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    /// Fused map before refinement.
    Raw,
    /// Output of the producer's fusion unit.
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    pub kind: EdgeKind,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            EdgeKind::Raw => "raw",
            EdgeKind::Refined => "refined",
        };
        write!(f, "{}->{}({tag})", self.from, self.to)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DependencyGraph {
    pub edges: BTreeSet<Edge>,
}

impl DependencyGraph {
    fn add(&mut self, from: usize, to: Node, kind: EdgeKind) {
        self.edges.insert(Edge {
            from: Node::Stage(from),
            to,
            kind,
        });
    }

    /// Producer/consumer pairs with the edge kind dropped.
    pub fn pairs(&self) -> BTreeSet<(Node, Node)> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    /// Inputs of `stage`'s unit in delivery order.
    pub fn inputs_of(&self, stage: usize) -> Vec<Edge> {
        let mut v: Vec<Edge> = self
            .edges
            .iter()
            .copied()
            .filter(|e| e.to == Node::Stage(stage))
            .collect();
        v.sort_by_key(|e| (std::cmp::Reverse(e.from), e.kind));
        v
    }

    /// Stages feeding the head, finest first.
    pub fn head_inputs(&self) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|e| match (e.from, e.to) {
                (Node::Stage(s), Node::Head) => Some(s),
                _ => None,
            })
            .collect()
    }

    pub fn is_acyclic(&self) -> bool {
        // Every edge points from a deeper stage to a finer one or to the head.
        self.edges.iter().all(|e| match (e.from, e.to) {
            (Node::Stage(a), Node::Stage(b)) => a > b,
            (Node::Stage(_), Node::Head) => true,
            _ => false,
        })
    }

    /// Whether the head is reachable from every stage.
    pub fn head_reachable(&self) -> bool {
        let mut reach: BTreeSet<Node> = BTreeSet::from([Node::Head]);
        loop {
            let before = reach.len();
            for e in &self.edges {
                if reach.contains(&e.to) {
                    reach.insert(e.from);
                }
            }
            if reach.len() == before {
                break;
            }
        }
        (1..=NUM_STAGES).all(|s| reach.contains(&Node::Stage(s)))
    }
}

/// The edge set realised by [`Decoder::forward`] for `strategy`.
pub fn dependency_graph(strategy: DecodingStrategy) -> DependencyGraph {
    use DecodingStrategy as S;
    use EdgeKind::{Raw, Refined};
    let mut g = DependencyGraph::default();
    let n = NUM_STAGES;
    let deeper = |i: usize| (i + 1)..=n;
    match strategy {
        S::Progressive => {
            for i in 1..n {
                g.add(i + 1, Node::Stage(i), Refined);
            }
            g.add(1, Node::Head, Refined);
        }
        S::RecursiveFeedback => {
            for i in 1..n {
                for j in deeper(i) {
                    g.add(j, Node::Stage(i), Refined);
                }
            }
            g.add(1, Node::Head, Refined);
        }
        S::Dense => {
            for i in 1..n {
                for j in deeper(i) {
                    g.add(j, Node::Stage(i), Raw);
                }
            }
            for s in 1..=n {
                g.add(s, Node::Head, Refined);
            }
        }
        S::DenseProgressive => {
            for i in 1..n {
                for j in deeper(i) {
                    g.add(j, Node::Stage(i), Raw);
                }
                g.add(i + 1, Node::Stage(i), Refined);
            }
            g.add(1, Node::Head, Refined);
        }
        S::DenseRecursiveFeedback => {
            for i in 1..n {
                for j in deeper(i) {
                    g.add(j, Node::Stage(i), Raw);
                    g.add(j, Node::Stage(i), Refined);
                }
            }
            g.add(1, Node::Head, Refined);
        }
        S::Feedback => {
            for i in 1..n - 1 {
                g.add(i + 1, Node::Stage(i), Refined);
            }
            g.add(1, Node::Head, Refined);
            g.add(n, Node::Head, Refined);
        }
        S::Separate => {
            g.add(2, Node::Stage(1), Refined);
            g.add(4, Node::Stage(3), Refined);
            g.add(1, Node::Head, Refined);
            g.add(3, Node::Head, Refined);
        }
        S::Pyramidal => {
            for i in 1..n {
                g.add(i + 1, Node::Stage(i), Raw);
                g.add(i + 1, Node::Stage(i), Refined);
            }
            g.add(1, Node::Head, Refined);
        }
    }
    g
}

/// Upsample, 3x3 conv + norm halving the width, 1x1 conv to one
/// logit channel, sigmoid. Several inputs are first resized to the finest
/// one, concatenated and mixed back to the unit width by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct CodHead {
    merge: Option<Conv2d>,
    refine: ConvNorm,
    logits: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub logits: Var,
    pub prob: Var,
}

impl CodHead {
    pub fn new(pb: &mut ParamBuilder, c: usize, n_inputs: usize) -> Result<Self> {
        if n_inputs == 0 {
            return Err(CodError::InvalidInput("head needs at least one input".into()));
        }
        let half = (c / 2).max(1);
        Ok(Self {
            merge: if n_inputs > 1 {
                Some(Conv2d::new(&mut pb.sub("merge"), n_inputs * c, c, 1, 1, true)?)
            } else {
                None
            },
            refine: ConvNorm::new(&mut pb.sub("refine"), c, half, 3, 1)?.without_relu(),
            logits: Conv2d::new(&mut pb.sub("logits"), half, 1, 1, 1, true)?,
        })
    }

    /// `inputs` finest first.
    pub fn forward(&self, ctx: &Ctx, inputs: &[Var], out_hw: (usize, usize)) -> Result<HeadVars> {
        let t = ctx.tape;
        let x = match &self.merge {
            Some(merge) => {
                let hw = t.hw(inputs[0]);
                let parts = inputs
                    .iter()
                    .map(|&v| t.resize_bilinear(v, hw))
                    .collect::<Result<Vec<_>>>()?;
                let cat = t.concat_channels(&parts)?;
                merge.forward(ctx, cat)?
            }
            None => {
                if inputs.len() != 1 {
                    return Err(CodError::Shape(format!("head expects 1 input, got {}", inputs.len())));
                }
                inputs[0]
            }
        };
        let up = t.resize_bilinear(x, out_hw)?;
        let y = self.refine.forward(ctx, up)?;
        let logits = self.logits.forward(ctx, y)?;
        Ok(HeadVars {
            logits,
            prob: t.sigmoid(logits),
        })
    }

    /// Plain-tensor head on a single map.
    pub fn apply(&self, store: &ParamStore, f: &FeatureMap, out_hw: (usize, usize)) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let x = tape.leaf(f.data.clone());
        let out = self.forward(&ctx, &[x], out_hw)?;
        Ok(tape.value(out.prob).as_ref().clone())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    strategy: DecodingStrategy,
    graph: DependencyGraph,
    /// `units[i]` serves stage `i + 1`.
    units: Vec<Mgfu>,
    head: CodHead,
}

#[derive(Clone, Debug)]
pub struct DecodeVars {
    pub head: HeadVars,
    /// Refined output per stage, stage 1 first.
    pub refined: Vec<Var>,
    /// Edges actually read, in execution order.
    pub reads: Vec<Edge>,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, c: usize, strategy: DecodingStrategy) -> Result<Self> {
        let graph = dependency_graph(strategy);
        let units = (1..=NUM_STAGES)
            .map(|s| Mgfu::new(&mut pb.sub(format!("mgfu{s}")), c, graph.inputs_of(s).len()))
            .collect::<Result<_>>()?;
        let head = CodHead::new(&mut pb.sub("head"), c, graph.head_inputs().len())?;
        Ok(Self {
            strategy,
            graph,
            units,
            head,
        })
    }

    pub fn strategy(&self) -> DecodingStrategy {
        self.strategy
    }

    pub fn graph(&self) -> &DependencyGraph {
        &self.graph
    }

    pub fn unit(&self, stage: usize) -> &Mgfu {
        &self.units[stage - 1]
    }

    pub fn head(&self) -> &CodHead {
        &self.head
    }

    /// `fused[i]` is the fused map of stage `i + 1`.
    pub fn forward(&self, ctx: &Ctx, fused: &[Var], out_hw: (usize, usize)) -> Result<DecodeVars> {
        let t = ctx.tape;
        if fused.len() != NUM_STAGES {
            return Err(CodError::Shape(format!(
                "decoder expects {NUM_STAGES} stages, got {}",
                fused.len()
            )));
        }
        let mut refined: Vec<Option<Var>> = vec![None; NUM_STAGES];
        let mut reads = Vec::new();
        for stage in (1..=NUM_STAGES).rev() {
            let mut inputs = Vec::new();
            for e in self.graph.inputs_of(stage) {
                let Node::Stage(src) = e.from else { unreachable!("head has no outputs") };
                let v = match e.kind {
                    EdgeKind::Raw => fused[src - 1],
                    EdgeKind::Refined => {
                        let r = refined[src - 1].expect("deeper stages run first");
                        if ctx.hooks.sever_feedback {
                            t.leaf(Tensor::zeros(t.shape(r)))
                        } else {
                            r
                        }
                    }
                };
                reads.push(e);
                inputs.push(v);
            }
            let out = self.units[stage - 1].forward(ctx, fused[stage - 1], &inputs)?;
            refined[stage - 1] = Some(out.output);
        }
        let refined: Vec<Var> = refined.into_iter().map(|r| r.expect("all stages ran")).collect();
        let head_in: Vec<Var> = self
            .graph
            .head_inputs()
            .into_iter()
            .map(|s| {
                reads.push(Edge {
                    from: Node::Stage(s),
                    to: Node::Head,
                    kind: EdgeKind::Refined,
                });
                refined[s - 1]
            })
            .collect();
        let head = self.head.forward(ctx, &head_in, out_hw)?;
        Ok(DecodeVars { head, refined, reads })
    }

    /// Plain-tensor decode returning the probability map and the read set.
    pub fn apply(
        &self,
        store: &ParamStore,
        fused: &[FeatureMap],
        out_hw: (usize, usize),
        hooks: Hooks,
    ) -> Result<(Tensor, Vec<Edge>)> {
        let tape = Tape::new();
        let ctx = Ctx::with_hooks(&tape, store, hooks);
        let vars: Vec<Var> = fused.iter().map(|f| tape.leaf(f.data.clone())).collect();
        let out = self.forward(&ctx, &vars, out_hw)?;
        Ok((tape.value(out.head.prob).as_ref().clone(), out.reads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: usize, b: Node) -> (Node, Node) {
        (Node::Stage(a), b)
    }

    #[test]
    fn names_round_trip() {
        for s in DecodingStrategy::ALL {
            assert_eq!(s.name().parse::<DecodingStrategy>().unwrap(), s);
        }
        assert!("zigzag".parse::<DecodingStrategy>().is_err());
    }

    #[test]
    fn recursive_feedback_edges() {
        let g = dependency_graph(DecodingStrategy::RecursiveFeedback);
        let expected: BTreeSet<_> = [
            pair(4, Node::Stage(3)),
            pair(4, Node::Stage(2)),
            pair(4, Node::Stage(1)),
            pair(3, Node::Stage(2)),
            pair(3, Node::Stage(1)),
            pair(2, Node::Stage(1)),
            pair(1, Node::Head),
        ]
        .into();
        assert_eq!(g.pairs(), expected);
        let counts: Vec<_> = (1..=4).map(|s| g.inputs_of(s).len()).collect();
        assert_eq!(counts, vec![3, 2, 1, 0]);
    }

    #[test]
    fn every_graph_is_acyclic_and_reaches_head() {
        for s in DecodingStrategy::ALL {
            let g = dependency_graph(s);
            assert!(g.is_acyclic(), "{s}");
            assert!(g.head_reachable(), "{s}");
        }
    }

    #[test]
    fn delivery_order_is_deepest_first_raw_first() {
        let g = dependency_graph(DecodingStrategy::DenseRecursiveFeedback);
        let order: Vec<_> = g.inputs_of(2).iter().map(|e| (e.from, e.kind)).collect();
        assert_eq!(
            order,
            vec![
                (Node::Stage(4), EdgeKind::Raw),
                (Node::Stage(4), EdgeKind::Refined),
                (Node::Stage(3), EdgeKind::Raw),
                (Node::Stage(3), EdgeKind::Refined),
            ]
        );
    }
}
