use super::{Result, Tape, Tensor, Var};

/// Reduce `out` against `cotangent` on the tape (for the analytic pass).
fn reduce_on_tape(tape: &mut Tape, out: Var, cotangent: Option<&[f32]>) -> Result<Var> {
    let n = tape.value(out).numel();
    match cotangent {
        Some(c) => tape.weighted_sum(out, c),
        None if n == 1 => Ok(out),
        None => Ok(tape.sum(out)),
    }
}

/// Reduce an output value in f64 (for the numeric pass), so the difference
/// quotient is not limited by rounding of an f32 total.
fn reduce_value(value: &Tensor, cotangent: Option<&[f32]>) -> f64 {
    match cotangent {
        Some(c) => value.data().iter().zip(c).map(|(&y, &w)| y as f64 * w as f64).sum(),
        None => value.data().iter().map(|&y| y as f64).sum(),
    }
}

/// Compare the tape gradient of `op` at `input` against central differences.
///
/// Non-scalar outputs are reduced by sum. Returns the largest
/// `|analytic − numeric| / max(|analytic|, 1e-6)` over input elements.
pub fn finite_diff_check<F>(op: F, input: &Tensor, h: f32) -> Result<f32>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    check(op, input, None, h)
}

/// As [`finite_diff_check`], reducing the output by a fixed cotangent
/// `Σ cᵢ·yᵢ` instead of a plain sum. Needed for ops whose plain sum is
/// constant (softmax, batch norm).
pub fn finite_diff_check_with<F>(op: F, input: &Tensor, cotangent: &[f32], h: f32) -> Result<f32>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    check(op, input, Some(cotangent), h)
}

fn check<F>(mut op: F, input: &Tensor, cotangent: Option<&[f32]>, h: f32) -> Result<f32>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let out = op(&mut tape, x)?;
    let loss = reduce_on_tape(&mut tape, out, cotangent)?;
    let analytic = tape
        .backward(loss)?
        .get(x)
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let mut eval = |value: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(value, true);
        let out = op(&mut tape, x)?;
        Ok(reduce_value(tape.value(out), cotangent))
    };

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let base = input.data()[i];
        let (up, down) = (base + h, base - h);
        let mut plus = input.clone();
        plus.data_mut()[i] = up;
        let mut minus = input.clone();
        minus.data_mut()[i] = down;
        let numeric = (eval(plus)? - eval(minus)?) / (up as f64 - down as f64);
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst as f32)
}
