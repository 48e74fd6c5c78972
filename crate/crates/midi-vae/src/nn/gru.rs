//! Gated recurrent unit cells in the original Cho et al. formulation:
//!
//! ```text
//! z  = sigmoid(Wz x + Uz h + bz)
//! r  = sigmoid(Wr x + Ur h + br)
//! hc = tanh(Wh x + Uh (r . h) + bh)
//! h' = (1 - z) . h + z . hc
//! ```
//!
//! The reset gate multiplies the hidden state before the recurrent
//! matmul. Parameters live in a [`ParamStore`]; a cell only remembers
//! store indices, so the same definition serves f32 training and f64
//! gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{glorot_uniform, orthogonal, zeros_vector, ParamStore};
use super::scalar::Scalar;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Store indices for one GRU layer's nine tensors.
#[derive(Debug, Clone)]
pub struct GruLayerParams {
    pub input_size: usize,
    pub state_size: usize,
    pub wz: usize,
    pub uz: usize,
    pub bz: usize,
    pub wr: usize,
    pub ur: usize,
    pub br: usize,
    pub wh: usize,
    pub uh: usize,
    pub bh: usize,
}

/// Update-gate bias at initialization. Negative values keep the update
/// gate mostly closed early on, so the state survives long sequences
/// and gradients reach early frames.
pub const UPDATE_BIAS_INIT: f64 = -1.0;

impl GruLayerParams {
    /// Register a fresh layer under `prefix` (input matrices Glorot
    /// uniform, recurrent matrices orthogonal, reset/candidate biases
    /// zero, update-gate bias at [`UPDATE_BIAS_INIT`]).
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        input_size: usize,
        state_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut input_mat = || glorot_uniform(rng, input_size, state_size);
        let wz = input_mat();
        let wr = input_mat();
        let wh = input_mat();
        let mut rec_rng = ChaCha8Rng::seed_from_u64(rng_fork(rng));
        let bz_init = Tensor::vector(vec![S::from_f64(UPDATE_BIAS_INIT); state_size]);
        GruLayerParams {
            input_size,
            state_size,
            wz: store.register(&format!("{prefix}.wz"), wz),
            uz: store.register(&format!("{prefix}.uz"), orthogonal(&mut rec_rng, state_size)),
            bz: store.register(&format!("{prefix}.bz"), bz_init),
            wr: store.register(&format!("{prefix}.wr"), wr),
            ur: store.register(&format!("{prefix}.ur"), orthogonal(&mut rec_rng, state_size)),
            br: store.register(&format!("{prefix}.br"), zeros_vector(state_size)),
            wh: store.register(&format!("{prefix}.wh"), wh),
            uh: store.register(&format!("{prefix}.uh"), orthogonal(&mut rec_rng, state_size)),
            bh: store.register(&format!("{prefix}.bh"), zeros_vector(state_size)),
        }
    }

    /// Bind this layer's tensors onto a tape for one forward/backward pass.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> BoundGruLayer {
        let mut leaf = |idx: usize| tape.param(idx, store.value(idx).clone());
        BoundGruLayer {
            wz: leaf(self.wz),
            uz: leaf(self.uz),
            bz: leaf(self.bz),
            wr: leaf(self.wr),
            ur: leaf(self.ur),
            br: leaf(self.br),
            wh: leaf(self.wh),
            uh: leaf(self.uh),
            bh: leaf(self.bh),
        }
    }
}

fn rng_fork(rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    rng.gen()
}

/// Tape node ids of one bound layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundGruLayer {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
}

/// One GRU time step. `x` is `[B, input]`, `h` is `[B, state]`; returns
/// the new hidden state node.
pub fn gru_step<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &BoundGruLayer,
    x: NodeId,
    h: NodeId,
) -> NodeId {
    let zx = tape.matmul(x, layer.wz);
    let zh = tape.matmul(h, layer.uz);
    let z = tape.add(zx, zh);
    let z = tape.add_bias(z, layer.bz);
    let z = tape.sigmoid(z);

    let rx = tape.matmul(x, layer.wr);
    let rh = tape.matmul(h, layer.ur);
    let r = tape.add(rx, rh);
    let r = tape.add_bias(r, layer.br);
    let r = tape.sigmoid(r);

    let gated = tape.mul(r, h);
    let cx = tape.matmul(x, layer.wh);
    let ch = tape.matmul(gated, layer.uh);
    let c = tape.add(cx, ch);
    let c = tape.add_bias(c, layer.bh);
    let candidate = tape.tanh(c);

    // h' = (1 - z) . h + z . hc, computed as h + z . (hc - h)
    let delta = tape.sub(candidate, h);
    let scaled = tape.mul(z, delta);
    tape.add(h, scaled)
}

/// A stack of GRU layers applied at one time step; layer `i + 1`
/// consumes layer `i`'s new state as input.
pub fn gru_stack_step<S: Scalar>(
    tape: &mut Tape<S>,
    layers: &[BoundGruLayer],
    x: NodeId,
    states: &[NodeId],
) -> Vec<NodeId> {
    assert_eq!(layers.len(), states.len());
    let mut input = x;
    let mut new_states = Vec::with_capacity(layers.len());
    for (layer, &h) in layers.iter().zip(states.iter()) {
        let h_new = gru_step(tape, layer, input, h);
        new_states.push(h_new);
        input = h_new;
    }
    new_states
}
