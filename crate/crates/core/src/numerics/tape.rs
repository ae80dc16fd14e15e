use super::kernels::{self, GruCache, GruGrads, GruWeights};
use super::{Matrix, ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Tape leaves holding the nine weight arrays of one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub b_r: NodeId,
    pub w_u: NodeId,
    pub u_u: NodeId,
    pub b_u: NodeId,
    pub w_c: NodeId,
    pub u_c: NodeId,
    pub b_c: NodeId,
}

impl GruNodes {
    fn ids(&self) -> [NodeId; 9] {
        [
            self.w_r, self.u_r, self.b_r, self.w_u, self.u_u, self.b_u, self.w_c, self.u_c,
            self.b_c,
        ]
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Affine {
        w: NodeId,
        b: NodeId,
        v: NodeId,
    },
    Gru {
        cell: GruNodes,
        h: NodeId,
        v: NodeId,
        cache: GruCache<T>,
    },
    Softmax {
        x: NodeId,
    },
    /// `(fixed + sum(inputs)) / denom`, where `fixed` is a constant already
    /// folded into the value.
    Mixture {
        inputs: Vec<NodeId>,
        denom: T,
    },
    Entropy {
        x: NodeId,
    },
    CrossEntropy {
        p: NodeId,
        q: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: T,
    },
    Dot {
        x: NodeId,
        c: Vec<T>,
    },
    Inner {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    saturations: usize,
    op: Op<T>,
}

/// Record of primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            saturations: 0,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        let n = self.node(id);
        assert_eq!(n.value.len(), 1, "node is not a scalar");
        n.value[0]
    }

    /// Number of clamped logarithm arguments inside this node.
    pub fn saturations(&self, id: NodeId) -> usize {
        self.node(id).saturations
    }

    pub fn constant(&mut self, m: Matrix<T>) -> NodeId {
        let (rows, cols) = m.shape();
        self.push(m.into_vec(), rows, cols, Op::Leaf)
    }

    pub fn vector(&mut self, v: Vec<T>) -> NodeId {
        let n = v.len();
        self.push(v, n, 1, Op::Leaf)
    }

    /// Leaf bound to a parameter; its gradient is routed back to the store by
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let e = store.entry(id);
        self.push(e.value.clone(), e.rows, e.cols, Op::Param(id))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x);
        let (value, rows, cols) = (n.value.clone(), n.rows, n.cols);
        self.push(value, rows, cols, Op::Leaf)
    }

    fn expect_vector(&self, id: NodeId, len: usize, what: &str) -> Result<()> {
        let n = self.node(id);
        if n.value.len() != len || (n.cols != 1 && n.rows != 1) {
            return Err(Error::Shape(format!(
                "{what}: expected vector of length {len}, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(())
    }

    /// `W v + b`.
    pub fn affine(&mut self, w: NodeId, b: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(w);
        self.expect_vector(v, cols, "affine input")?;
        self.expect_vector(b, rows, "affine bias")?;
        let mut out = self.value(b).to_vec();
        kernels::matvec_acc(&mut out, self.value(w), self.value(v));
        Ok(self.push(out, rows, 1, Op::Affine { w, b, v }))
    }

    fn gru_weights(&self, cell: &GruNodes) -> GruWeights<'_, T> {
        GruWeights {
            w_r: self.value(cell.w_r),
            u_r: self.value(cell.u_r),
            b_r: self.value(cell.b_r),
            w_u: self.value(cell.w_u),
            u_u: self.value(cell.u_u),
            b_u: self.value(cell.b_u),
            w_c: self.value(cell.w_c),
            u_c: self.value(cell.u_c),
            b_c: self.value(cell.b_c),
        }
    }

    fn check_gru(&self, cell: &GruNodes, h: NodeId, v: NodeId) -> Result<usize> {
        let (hidden, input) = self.shape(cell.w_r);
        for (id, r, c, name) in [
            (cell.w_u, hidden, input, "W_u"),
            (cell.w_c, hidden, input, "W_c"),
            (cell.u_r, hidden, hidden, "U_r"),
            (cell.u_u, hidden, hidden, "U_u"),
            (cell.u_c, hidden, hidden, "U_c"),
        ] {
            if self.shape(id) != (r, c) {
                return Err(Error::Shape(format!(
                    "GRU {name}: expected {r}x{c}, got {:?}",
                    self.shape(id)
                )));
            }
        }
        self.expect_vector(cell.b_r, hidden, "GRU b_r")?;
        self.expect_vector(cell.b_u, hidden, "GRU b_u")?;
        self.expect_vector(cell.b_c, hidden, "GRU b_c")?;
        self.expect_vector(h, hidden, "GRU hidden state")?;
        self.expect_vector(v, input, "GRU input")?;
        Ok(hidden)
    }

    pub fn gru_cell(&mut self, cell: &GruNodes, h: NodeId, v: NodeId) -> Result<NodeId> {
        let hidden = self.check_gru(cell, h, v)?;
        let (out, cache) =
            kernels::gru_cell_forward(&self.gru_weights(cell), self.value(h), self.value(v));
        Ok(self.push(
            out,
            hidden,
            1,
            Op::Gru {
                cell: *cell,
                h,
                v,
                cache,
            },
        ))
    }

    /// Folds [`Self::gru_cell`] over the rows of `frames`, starting from
    /// `h0`, and returns the final state.
    pub fn gru_sequence(
        &mut self,
        cell: &GruNodes,
        h0: NodeId,
        frames: &Matrix<T>,
    ) -> Result<NodeId> {
        if frames.rows() == 0 {
            return Err(Error::Shape("GRU over an empty sequence".into()));
        }
        let mut h = h0;
        for row in frames.row_iter() {
            let v = self.vector(row.to_vec());
            h = self.gru_cell(cell, h, v)?;
        }
        Ok(h)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let p = kernels::softmax(self.value(x))
            .ok_or_else(|| Error::NonFinite("softmax logits contain NaN or infinity".into()))?;
        Ok(self.push(p, rows, cols, Op::Softmax { x }))
    }

    /// Elementwise average of equally shaped nodes.
    pub fn mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.mixture(inputs, None, 0)
    }

    /// `(fixed_sum + sum(inputs)) / (fixed_count + inputs.len())`. The fixed
    /// part is a constant: it shifts the value but carries no gradient.
    pub fn mixture(
        &mut self,
        inputs: &[NodeId],
        fixed_sum: Option<&[T]>,
        fixed_count: usize,
    ) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("mean of an empty list".into()))?;
        let (rows, cols) = self.shape(first);
        let mut acc = match fixed_sum {
            Some(f) if f.len() == rows * cols => f.to_vec(),
            Some(f) => {
                return Err(Error::Shape(format!(
                    "fixed sum has length {}, expected {}",
                    f.len(),
                    rows * cols
                )))
            }
            None => vec![T::zero(); rows * cols],
        };
        for &id in inputs {
            if self.shape(id) != (rows, cols) {
                return Err(Error::Shape(format!(
                    "mean over mismatched shapes {:?} and {:?}",
                    (rows, cols),
                    self.shape(id)
                )));
            }
            kernels::add_assign(&mut acc, self.value(id));
        }
        let denom = T::of((inputs.len() + fixed_count) as f64);
        acc.iter_mut().for_each(|a| *a = *a / denom);
        Ok(self.push(
            acc,
            rows,
            cols,
            Op::Mixture {
                inputs: inputs.to_vec(),
                denom,
            },
        ))
    }

    /// Entropy of a probability vector, in bits.
    pub fn entropy_bits(&mut self, x: NodeId) -> NodeId {
        let (h, sat) = kernels::entropy_bits(self.value(x));
        let id = self.push(vec![h], 1, 1, Op::Entropy { x });
        self.nodes[id.0].saturations = sat;
        id
    }

    /// `sum_z p[z] * -log2 q[z]`.
    pub fn cross_entropy_bits(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        if self.value(p).len() != self.value(q).len() {
            return Err(Error::Shape(format!(
                "cross-entropy between lengths {} and {}",
                self.value(p).len(),
                self.value(q).len()
            )));
        }
        let (h, sat) = kernels::cross_entropy_bits(self.value(p), self.value(q));
        let id = self.push(vec![h], 1, 1, Op::CrossEntropy { p, q });
        self.nodes[id.0].saturations = sat;
        Ok(id)
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.same_shape(a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.push(v, rows, cols, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.same_shape(a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x - *y)
            .collect();
        Ok(self.push(v, rows, cols, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let (rows, cols) = self.shape(x);
        let v = self.value(x).iter().map(|v| *v * k).collect();
        self.push(v, rows, cols, Op::Scale { x, k })
    }

    /// Scalar `sum_i c_i x_i` for a fixed coefficient vector.
    pub fn dot_const(&mut self, x: NodeId, c: Vec<T>) -> Result<NodeId> {
        if c.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "dot with {} coefficients over {} values",
                c.len(),
                self.value(x).len()
            )));
        }
        let s = self.value(x).iter().zip(&c).map(|(a, b)| *a * *b).sum();
        Ok(self.push(vec![s], 1, 1, Op::Dot { x, c }))
    }

    /// Scalar `sum_i a_i b_i`.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .sum();
        Ok(self.push(vec![s], 1, 1, Op::Inner { a, b }))
    }

    /// Reverse sweep from a scalar root. The tape is left intact so several
    /// roots can be differentiated in turn.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Affine { w, b, v } => {
                    kernels::outer_acc(slot(&mut grads, self, *w), &g, self.value(*v));
                    kernels::add_assign(slot(&mut grads, self, *b), &g);
                    kernels::matvec_t_acc(slot(&mut grads, self, *v), self.value(*w), &g);
                }
                Op::Gru { cell, h, v, cache } => {
                    let ids = cell.ids();
                    let mut taken: Vec<Vec<T>> = ids
                        .iter()
                        .map(|id| take_slot(&mut grads, self, *id))
                        .collect();
                    let mut dh = take_slot(&mut grads, self, *h);
                    let mut dv = take_slot(&mut grads, self, *v);
                    {
                        let [w_r, u_r, b_r, w_u, u_u, b_u, w_c, u_c, b_c] = &mut taken[..] else {
                            unreachable!()
                        };
                        let mut gg = GruGrads {
                            w_r,
                            u_r,
                            b_r,
                            w_u,
                            u_u,
                            b_u,
                            w_c,
                            u_c,
                            b_c,
                        };
                        kernels::gru_cell_backward(
                            &self.gru_weights(cell),
                            self.value(*h),
                            self.value(*v),
                            cache,
                            &g,
                            &mut gg,
                            &mut dh,
                            &mut dv,
                        );
                    }
                    // Put back in reverse so that aliased ids (the same node
                    // used twice) end up with the combined buffer.
                    restore_slot(&mut grads, *v, dv);
                    restore_slot(&mut grads, *h, dh);
                    for (id, buf) in ids.iter().zip(taken).rev() {
                        restore_slot(&mut grads, *id, buf);
                    }
                }
                Op::Softmax { x } => {
                    kernels::softmax_backward(&node.value, &g, slot(&mut grads, self, *x));
                }
                Op::Mixture { inputs, denom } => {
                    let scaled: Vec<T> = g.iter().map(|v| *v / *denom).collect();
                    for id in inputs {
                        kernels::add_assign(slot(&mut grads, self, *id), &scaled);
                    }
                }
                Op::Entropy { x } => {
                    kernels::entropy_bits_backward(
                        self.value(*x),
                        g[0],
                        slot(&mut grads, self, *x),
                    );
                }
                Op::CrossEntropy { p, q } => {
                    let mut dp = take_slot(&mut grads, self, *p);
                    let mut dq = take_slot(&mut grads, self, *q);
                    kernels::cross_entropy_bits_backward(
                        self.value(*p),
                        self.value(*q),
                        g[0],
                        &mut dp,
                        &mut dq,
                    );
                    restore_slot(&mut grads, *q, dq);
                    restore_slot(&mut grads, *p, dp);
                }
                Op::Add { a, b } => {
                    kernels::add_assign(slot(&mut grads, self, *a), &g);
                    kernels::add_assign(slot(&mut grads, self, *b), &g);
                }
                Op::Sub { a, b } => {
                    kernels::add_assign(slot(&mut grads, self, *a), &g);
                    let neg: Vec<T> = g.iter().map(|v| -*v).collect();
                    kernels::add_assign(slot(&mut grads, self, *b), &neg);
                }
                Op::Scale { x, k } => {
                    let s: Vec<T> = g.iter().map(|v| *v * *k).collect();
                    kernels::add_assign(slot(&mut grads, self, *x), &s);
                }
                Op::Dot { x, c } => {
                    let s: Vec<T> = c.iter().map(|v| *v * g[0]).collect();
                    kernels::add_assign(slot(&mut grads, self, *x), &s);
                }
                Op::Inner { a, b } => {
                    let da: Vec<T> = self.value(*b).iter().map(|v| *v * g[0]).collect();
                    let db: Vec<T> = self.value(*a).iter().map(|v| *v * g[0]).collect();
                    kernels::add_assign(slot(&mut grads, self, *a), &da);
                    kernels::add_assign(slot(&mut grads, self, *b), &db);
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }
        Gradients {
            grads,
            bindings: self.bindings(),
        }
    }

    fn bindings(&self) -> Vec<(usize, ParamId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect()
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], tape: &Tape<T>, id: NodeId) -> &'g mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); tape.value(id).len()])
}

fn take_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], tape: &Tape<T>, id: NodeId) -> Vec<T> {
    grads[id.0]
        .take()
        .unwrap_or_else(|| vec![T::zero(); tape.value(id).len()])
}

/// Returns a buffer taken with [`take_slot`], summing with anything that was
/// written to the slot in the meantime.
fn restore_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, mut buf: Vec<T>) {
    if let Some(existing) = grads[id.0].take() {
        kernels::add_assign(&mut buf, &existing);
    }
    grads[id.0] = Some(buf);
}

/// Output of [`Tape::backward`]: gradients of the root with respect to every
/// leaf that it depends on.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf, `None` when the root does not depend
    /// on it.
    pub fn wrt(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter-bound leaf gradient into the store's gradient
    /// slots. A parameter bound to several leaves receives the sum.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        self.accumulate_filtered(store, |_| true);
    }

    /// Like [`Self::accumulate_into`] restricted to parameters for which
    /// `keep` returns true.
    pub fn accumulate_filtered(&self, store: &mut ParamStore<T>, keep: impl Fn(ParamId) -> bool) {
        for &(node, pid) in &self.bindings {
            if !keep(pid) {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                kernels::add_assign(&mut store.entry_mut(pid).grad, g);
            }
        }
    }
}
