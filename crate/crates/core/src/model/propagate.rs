//! Flag-initialised message passing, batched over target pairs.
//!
//! Node states for `P` target pairs over `m` entities are stored as one
//! `[P * m, d_n]` node; row `p * m + i` is entity `i` under target pair `p`.

use crate::error::{Error, Result};
use crate::tensor::{Activation, Tape, Tensor, Var};

use super::EntityGraph;

fn check_node_dim(d_n: usize) -> Result<()> {
    if d_n == 0 || !d_n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "node state width must be a positive even integer, got {d_n}"
        )));
    }
    Ok(())
}

/// Layer-0 states `[m, d_n]` for target `(s, o)`: the subject gets ones in
/// its first half, the object ones in its second half, all others zero.
pub fn initialize_node_states(m: usize, target: (usize, usize), d_n: usize) -> Result<Tensor> {
    initial_states(m, &[target], d_n)
}

/// Layer-0 states for several target pairs, `[targets.len() * m, d_n]`.
pub fn initial_states(m: usize, targets: &[(usize, usize)], d_n: usize) -> Result<Tensor> {
    check_node_dim(d_n)?;
    let half = d_n / 2;
    let mut values = vec![0.0; targets.len() * m * d_n];
    for (p, &(s, o)) in targets.iter().enumerate() {
        if s == o || s >= m || o >= m {
            return Err(Error::Config(format!(
                "target pair ({s}, {o}) is not a pair of distinct entities among {m}"
            )));
        }
        let subject = (p * m + s) * d_n;
        values[subject..subject + half].fill(1.0);
        let object = (p * m + o) * d_n;
        values[object + half..object + d_n].fill(1.0);
    }
    Tensor::new(vec![targets.len() * m, d_n], values)
}

/// One propagation step for `pairs` stacked target pairs:
/// `h'_i = sum_{j != i} act(A[i][j] h_j)`, with `transitions` holding one
/// `[d_n, d_n]` matrix per graph edge.
pub fn propagate_layer(
    tape: &mut Tape,
    states: Var,
    transitions: Var,
    graph: &EntityGraph,
    pairs: usize,
    activation: Activation,
) -> Result<Var> {
    let m = graph.m;
    let edges = graph.edge_count();
    let sa = tape.shape(transitions).to_vec();
    let ss = tape.shape(states).to_vec();
    if sa.len() != 3 || sa[0] != edges || sa[1] != sa[2] {
        return Err(Error::shape(
            "propagate_layer transitions",
            &sa,
            &[edges, ss[1], ss[1]],
        ));
    }
    if ss.len() != 2 || ss[0] != pairs * m || ss[1] != sa[2] {
        return Err(Error::shape(
            "propagate_layer states",
            &ss,
            &[pairs * m, sa[2]],
        ));
    }
    let mut which = Vec::with_capacity(pairs * edges);
    let mut source = Vec::with_capacity(pairs * edges);
    let mut dest = Vec::with_capacity(pairs * edges);
    for p in 0..pairs {
        for (e, &(i, j)) in graph.edges.iter().enumerate() {
            which.push(e);
            source.push(p * m + j);
            dest.push(p * m + i);
        }
    }
    let a = if pairs == 1 {
        transitions
    } else {
        tape.gather_rows(transitions, &which)?
    };
    let x = tape.gather_rows(states, &source)?;
    let messages = tape.batched_matvec(a, x)?;
    let messages = tape.activation(messages, activation);
    tape.scatter_add_rows(messages, &dest, pairs * m)
}

/// Pair features `[P, K * d_n]`: for each layer state in `layers`, the
/// elementwise product of the subject's and object's rows, concatenated.
pub fn pair_representation(
    tape: &mut Tape,
    layers: &[Var],
    targets: &[(usize, usize)],
    m: usize,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config(
            "pair representation needs at least one layer".into(),
        ));
    }
    let subjects: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(p, &(s, _))| p * m + s)
        .collect();
    let objects: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(p, &(_, o))| p * m + o)
        .collect();
    let mut blocks = Vec::with_capacity(layers.len());
    for &h in layers {
        let hs = tape.gather_rows(h, &subjects)?;
        let ho = tape.gather_rows(h, &objects)?;
        blocks.push(tape.mul(hs, ho)?);
    }
    if blocks.len() == 1 {
        return Ok(blocks[0]);
    }
    tape.concat(&blocks, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_for_d4() {
        let h = initialize_node_states(3, (0, 2), 4).unwrap();
        assert_eq!(
            h.values(),
            &[1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 1., 1.]
        );
        assert!(initialize_node_states(3, (0, 2), 3).is_err());
        assert!(initialize_node_states(3, (1, 1), 4).is_err());
    }

    fn identity_graph_step(act: Activation, a_value: f64) -> Vec<f64> {
        let graph = EntityGraph::new(2).unwrap();
        let mut tape = Tape::new();
        let a: Vec<f64> = (0..2).flat_map(|_| [a_value, 0.0, 0.0, a_value]).collect();
        let a = tape.constant(&[2, 2, 2], a).unwrap();
        let h0 = initialize_node_states(2, (0, 1), 2).unwrap();
        let h0 = tape.leaf(&h0);
        let h1 = propagate_layer(&mut tape, h0, a, &graph, 1, act).unwrap();
        tape.value(h1).to_vec()
    }

    #[test]
    fn identity_swaps_flags() {
        assert_eq!(
            identity_graph_step(Activation::Relu, 1.0),
            vec![0., 1., 1., 0.]
        );
    }

    #[test]
    fn zero_transitions_collapse_states() {
        assert_eq!(identity_graph_step(Activation::Relu, 0.0), vec![0.; 4]);
    }

    #[test]
    fn pair_features_multiply() {
        let mut tape = Tape::new();
        let h = tape.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let r = pair_representation(&mut tape, &[h], &[(0, 1)], 2).unwrap();
        assert_eq!(tape.value(r), &[3., 8.]);
        let r2 = pair_representation(&mut tape, &[h, h], &[(0, 1)], 2).unwrap();
        assert_eq!(tape.shape(r2), &[1, 4]);
    }
}
