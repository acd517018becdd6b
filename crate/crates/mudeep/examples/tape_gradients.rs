//! Uses the reverse-mode tape directly: builds a tiny fully connected
//! expression, runs backward, and compares one gradient coordinate against
//! a central finite difference.
//!
//! ```bash
//! cargo run -p mudeep --example tape_gradients
//! ```

use mudeep::autodiff::Tape;
use mudeep::param::{InitKind, ParamRegistry};
use mudeep::Tensor;

fn main() -> mudeep::Result<()> {
    let mut registry = ParamRegistry::<f64>::new();
    let w = registry.create("w", &[2, 3], InitKind::HeNormal { fan_in: 3 })?;
    let b = registry.create("b", &[2], InitKind::Zero)?;
    registry.init_parameters(42);

    let x = Tensor::from_vec(&[4, 3], (0..12).map(|i| i as f64 / 10.0).collect())?;
    let labels = [0usize, 1, 0, 1];

    // loss(w, b) built on a fresh tape each evaluation
    let eval = |with_grad: bool| -> mudeep::Result<f64> {
        registry.zero_grad();
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.param(&w), tape.param(&b));
        let logits = tape.fully_connected(vx, vw, vb)?;
        let act = tape.relu(logits);
        let loss = tape.softmax_cross_entropy(act, &labels)?;
        let value = tape.value(loss).item();
        if with_grad {
            tape.backward(loss)?;
        }
        Ok(value)
    };

    let loss = eval(true)?;
    let analytic = w.borrow().grad.data()[0];
    println!("loss            = {loss:.6}");
    println!("d loss / d w[0] = {analytic:+.6e} (tape)");

    // central finite difference on the same coordinate
    let h = 1e-6;
    let orig = w.borrow().value.data()[0];
    w.borrow_mut().value.data_mut()[0] = orig + h;
    let lp = eval(false)?;
    w.borrow_mut().value.data_mut()[0] = orig - h;
    let lm = eval(false)?;
    w.borrow_mut().value.data_mut()[0] = orig;
    let fd = (lp - lm) / (2.0 * h);
    println!("d loss / d w[0] = {fd:+.6e} (finite difference)");
    println!("relative error  = {:.3e}", ((analytic - fd) / fd).abs());
    Ok(())
}
