use crate::error::{AutodiffError, Result};
use crate::tape::{Op, Tape};
use crate::tensor::Tensor;

/// Reverse-mode gradients of a scalar `loss` with respect to each of `wrt`.
///
/// Every vector-Jacobian product is computed with ordinary tensor operations.
/// With `create_graph` the operands are rebuilt attached to the tape, so the
/// returned gradients are themselves recorded and can be differentiated
/// again. Without it the sweep runs entirely on detached constants.
///
/// Operands in `wrt` that do not influence `loss` get a zero gradient.
pub fn backward(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(AutodiffError::contract(
            "backward",
            format!("loss must be a scalar, got shape {:?}", loss.shape()),
        ));
    }
    let root = loss
        .node()
        .ok_or_else(|| AutodiffError::contract("backward", "loss is not recorded on a tape"))?;
    let tape: &Tape = &root.tape;
    tape.check_live(root)?;
    let generation = root.generation;

    let mut targets = Vec::with_capacity(wrt.len());
    for w in wrt {
        let n = w
            .node()
            .ok_or_else(|| AutodiffError::contract("backward", "gradient requested for an unrecorded tensor"))?;
        if !n.tape.same_as(tape) {
            return Err(AutodiffError::TapeMismatch { op: "backward" });
        }
        tape.check_live(n)?;
        targets.push(n.id);
    }

    let last = root.id;
    let parents = tape.parents(last);
    // needed[i]: node i lies on a path from some target to the loss.
    let mut needed = vec![false; last + 1];
    for &t in &targets {
        if t <= last {
            needed[t] = true;
        }
    }
    for id in 0..=last {
        if !needed[id] {
            needed[id] = parents[id].iter().any(|&p| needed[p]);
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; last + 1];
    grads[last] = Some(Tensor::ones(loss.shape()));
    let attach = create_graph.then_some((tape, generation));

    for id in (0..=last).rev() {
        if !needed[id] {
            continue;
        }
        let Some(g) = grads[id].clone() else { continue };
        let node = tape.node(id);
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let xs: Vec<Tensor> = node.inputs.iter().map(|s| Tensor::from_saved(s, attach)).collect();
        let y = Tensor::from_saved(&node.output, attach);
        let input_grads = vjp(&node.op, &g, &xs, &y)?;
        for (saved, gi) in node.inputs.iter().zip(input_grads) {
            let (Some(pid), Some(gi)) = (saved.node, gi) else { continue };
            if !needed[pid] {
                continue;
            }
            grads[pid] = Some(match grads[pid].take() {
                Some(acc) => acc.add(&gi)?,
                None => gi,
            });
        }
    }

    Ok(wrt
        .iter()
        .zip(&targets)
        .map(|(w, &id)| match grads.get(id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(w.shape()),
        })
        .collect())
}

/// First-order gradients, never recorded.
pub fn grad(loss: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
    backward(loss, wrt, false)
}

fn vjp(op: &Op, g: &Tensor, xs: &[Tensor], y: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let one = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), Some(g.neg()?)]),
        Op::Mul => Ok(vec![Some(g.mul(&xs[1])?), Some(g.mul(&xs[0])?)]),
        Op::Scale(c) => one(g.scale(*c)?),
        Op::AddScalar => one(g.clone()),
        Op::Neg => one(g.neg()?),
        Op::Recip => one(g.mul(&y.square()?)?.neg()?),
        Op::Tanh => one(g.sub(&g.mul(&y.square()?)?)?),
        Op::Relu => {
            let mask: Vec<f64> = xs[0].data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            one(g.mul(&Tensor::from_vec(xs[0].shape(), mask)?)?)
        }
        Op::Exp => one(g.mul(y)?),
        Op::Log => one(g.mul(&xs[0].recip()?)?),
        Op::Sum => one(g.expand_scalar(xs[0].shape())?),
        Op::SumAxis0 => one(g.expand_rows(xs[0].rows())?),
        Op::SumAxis1 => one(g.expand_cols(xs[0].cols())?),
        Op::ExpandScalar => one(g.sum()?.reshape(xs[0].shape())?),
        Op::ExpandRows => one(g.sum_axis0()?),
        Op::ExpandCols => one(g.sum_axis1()?),
        Op::AddRow => Ok(vec![Some(g.clone()), Some(g.sum_axis0()?)]),
        Op::MatMul => Ok(vec![Some(g.matmul_nt(&xs[1])?), Some(xs[0].matmul_tn(g)?)]),
        Op::MatMulNT => Ok(vec![Some(g.matmul(&xs[1])?), Some(g.matmul_tn(&xs[0])?)]),
        Op::MatMulTN => Ok(vec![Some(xs[1].matmul_nt(g)?), Some(xs[0].matmul(g)?)]),
        Op::Transpose => one(g.transpose()?),
        Op::Reshape => one(g.reshape(xs[0].shape())?),
        Op::ConcatRows(sizes) => {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &len in sizes {
                out.push(Some(g.slice_rows(start, len)?));
                start += len;
            }
            Ok(out)
        }
        Op::ConcatCols(sizes) => {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &len in sizes {
                out.push(Some(g.slice_cols(start, len)?));
                start += len;
            }
            Ok(out)
        }
        Op::SliceRows { start } => one(g.pad_rows(*start, xs[0].rows())?),
        Op::SliceCols { start } => one(g.pad_cols(*start, xs[0].cols())?),
        Op::PadRows { start } => one(g.slice_rows(*start, xs[0].rows())?),
        Op::PadCols { start } => one(g.slice_cols(*start, xs[0].cols())?),
        Op::Gather(indices) => one(g.scatter_rows(indices, xs[0].rows())?),
        Op::ScatterRows(indices) => one(g.gather_rows(indices)?),
        Op::Softmax => {
            let inner = g.mul(y)?.sum_axis1()?.expand_cols(y.cols())?;
            one(y.mul(&g.sub(&inner)?)?)
        }
        Op::LogSumExp => one(g.expand_cols(xs[0].cols())?.mul(&xs[0].softmax()?)?),
    }
}
