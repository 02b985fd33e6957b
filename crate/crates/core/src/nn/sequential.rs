//! A linear stack of ops with a recorded tape for backpropagation.
//!
//! Pooling ops write their switches into numbered slots that matching
//! unpooling ops read back, which is all the encoder/decoder wiring needs.

use super::ops::{
    max_pool2, max_pool2_backward, max_unpool2, max_unpool2_backward, sigmoid, BatchNorm2d, BnCache, Conv2d, Linear,
    Switches,
};
use super::param::{digest_params, Param};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Linear(Linear),
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    MaxPool { slot: usize },
    Unpool { slot: usize },
    Flatten,
    Reshape { channels: usize, height: usize, width: usize },
}

impl Op {
    pub fn name(&self) -> &str {
        match self {
            Op::Conv(c) => c.weight.name.trim_end_matches(".weight"),
            Op::BatchNorm(b) => b.gamma.name.trim_end_matches(".gamma"),
            Op::Linear(l) => l.weight.name.trim_end_matches(".weight"),
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::MaxPool { .. } => "max_pool",
            Op::Unpool { .. } => "unpool",
            Op::Flatten => "flatten",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Op::Conv(c) => c.params(),
            Op::BatchNorm(b) => b.params(),
            Op::Linear(l) => l.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Op::Conv(c) => c.params_mut(),
            Op::BatchNorm(b) => b.params_mut(),
            Op::Linear(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }
}

/// How batch normalization behaves during a recorded forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Batch,
    /// Normalize with the stored running estimates; nothing is mutated.
    Running,
}

#[derive(Debug, Clone)]
enum Saved {
    Nothing,
    Input(Tensor),
    Output(Tensor),
    Bn(BnCache),
    Shape([usize; 4]),
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    ops: Vec<Op>,
    slots: usize,
    tape: Vec<Saved>,
    switches: Vec<Option<Switches>>,
}

impl PartialEq for Sequential {
    fn eq(&self, other: &Self) -> bool {
        self.ops == other.ops
    }
}

impl Sequential {
    pub fn new(ops: Vec<Op>) -> Self {
        let slots = ops
            .iter()
            .filter_map(|op| match op {
                Op::MaxPool { slot } | Op::Unpool { slot } => Some(slot + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        Self {
            ops,
            slots,
            tape: Vec::new(),
            switches: Vec::new(),
        }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn ops_mut(&mut self) -> &mut [Op] {
        &mut self.ops
    }

    fn run(&self, mut x: Tensor, bn: BnMode, record: bool) -> (Tensor, Vec<Saved>, Vec<Option<Switches>>) {
        let mut tape = Vec::with_capacity(if record { self.ops.len() } else { 0 });
        let mut switches: Vec<Option<Switches>> = vec![None; self.slots];
        for op in &self.ops {
            let (y, saved) = match op {
                Op::Conv(c) => {
                    let y = c.forward(&x);
                    (y, if record { Saved::Input(x) } else { Saved::Nothing })
                }
                Op::Linear(l) => {
                    let y = l.forward(&x);
                    (y, if record { Saved::Input(x) } else { Saved::Nothing })
                }
                Op::BatchNorm(b) => {
                    let (y, cache) = b.forward(&x, bn == BnMode::Batch);
                    (y, if record { Saved::Bn(cache) } else { Saved::Nothing })
                }
                Op::Relu => {
                    let y = x.map(|v| v.max(0.0));
                    (y.clone(), if record { Saved::Output(y) } else { Saved::Nothing })
                }
                Op::LeakyRelu(slope) => {
                    let s = *slope;
                    let y = x.map(|v| if v > 0.0 { v } else { s * v });
                    (y, if record { Saved::Input(x) } else { Saved::Nothing })
                }
                Op::Sigmoid => {
                    let y = x.map(sigmoid);
                    (y.clone(), if record { Saved::Output(y) } else { Saved::Nothing })
                }
                Op::MaxPool { slot } => {
                    let (y, sw) = max_pool2(&x);
                    switches[*slot] = Some(sw);
                    (y, Saved::Nothing)
                }
                Op::Unpool { slot } => {
                    let sw = switches[*slot].as_ref().expect("unpool slot filled by an earlier pool");
                    (max_unpool2(&x, sw), Saved::Nothing)
                }
                Op::Flatten => {
                    let shape = x.shape();
                    let n = shape[0];
                    let f = x.numel() / n.max(1);
                    (x.reshaped([n, f, 1, 1]), Saved::Shape(shape))
                }
                Op::Reshape {
                    channels,
                    height,
                    width,
                } => {
                    let shape = x.shape();
                    (x.reshaped([shape[0], *channels, *height, *width]), Saved::Shape(shape))
                }
            };
            if record {
                tape.push(saved);
            }
            x = y;
        }
        (x, tape, switches)
    }

    /// Forward pass without recording; batch norm uses running statistics.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x.clone(), BnMode::Running, false).0
    }

    /// Forward pass that records what [`Sequential::backward`] needs.
    pub fn forward(&mut self, x: &Tensor, bn: BnMode) -> Tensor {
        let (y, tape, switches) = self.run(x.clone(), bn, true);
        if bn == BnMode::Batch {
            for (op, saved) in self.ops.iter_mut().zip(&tape) {
                if let (Op::BatchNorm(b), Saved::Bn(cache)) = (op, saved) {
                    b.update_running(cache);
                }
            }
        }
        self.tape = tape;
        self.switches = switches;
        y
    }

    /// Backpropagates through the last recorded forward pass.
    ///
    /// Parameter gradients are accumulated only when `accumulate` is set; the
    /// gradient with respect to the network input is returned only when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, grad: Tensor, accumulate: bool, need_input_grad: bool) -> Option<Tensor> {
        assert_eq!(self.tape.len(), self.ops.len(), "backward without a recorded forward pass");
        let tape = std::mem::take(&mut self.tape);
        let mut g = grad;
        for (i, (op, saved)) in self.ops.iter_mut().zip(&tape).enumerate().rev() {
            let first = i == 0;
            if first && !need_input_grad {
                match (op, saved) {
                    (Op::Conv(c), Saved::Input(x)) if accumulate => {
                        c.backward(x, &g, true, false);
                    }
                    (Op::Linear(l), Saved::Input(x)) if accumulate => {
                        l.backward(x, &g, true, false);
                    }
                    _ => {}
                }
                return None;
            }
            g = match (op, saved) {
                (Op::Conv(c), Saved::Input(x)) => c.backward(x, &g, accumulate, true).expect("input grad"),
                (Op::Linear(l), Saved::Input(x)) => l.backward(x, &g, accumulate, true).expect("input grad"),
                (Op::BatchNorm(b), Saved::Bn(cache)) => b.backward(cache, &g, accumulate),
                (Op::Relu, Saved::Output(y)) => {
                    let mut gx = g;
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        if yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    gx
                }
                (Op::LeakyRelu(s), Saved::Input(x)) => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv *= *s;
                        }
                    }
                    gx
                }
                (Op::Sigmoid, Saved::Output(y)) => {
                    let mut gx = g;
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        *gv *= yv * (1.0 - yv);
                    }
                    gx
                }
                (Op::MaxPool { slot }, _) => {
                    max_pool2_backward(self.switches[*slot].as_ref().expect("pool switches"), &g)
                }
                (Op::Unpool { slot }, _) => {
                    max_unpool2_backward(self.switches[*slot].as_ref().expect("pool switches"), &g)
                }
                (Op::Flatten, Saved::Shape(s)) | (Op::Reshape { .. }, Saved::Shape(s)) => g.reshaped(*s),
                (op, _) => unreachable!("tape entry does not match op {}", op.name()),
            };
        }
        Some(g)
    }

    /// All named tensors, trainable or not, in a stable order.
    pub fn state(&self) -> Vec<&Param> {
        self.ops.iter().flat_map(Op::params).collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Param> {
        self.ops.iter_mut().flat_map(Op::params_mut).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Param> {
        self.state_mut().into_iter().filter(|p| p.trainable).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.state().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.state_mut() {
            p.zero_grad();
        }
    }

    pub fn digest(&self) -> String {
        digest_params(self.state())
    }
}
