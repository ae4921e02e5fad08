use shortcut_core::models::{BiasOnlyConfig, BiasOnlyModel, BoundParams, ClassifierConfig, ClassifierModel, EncoderKind};
use shortcut_core::tensor::{finite_diff_check, Tape, Tensor, Var};
use shortcut_core::training::losses::{
    combined_loss, combined_loss_var, cross_entropy, er_loss, er_loss_var, poe_loss, poe_loss_var, PoeForm,
};
use shortcut_core::tensor::softmax;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn classifier(encoder: EncoderKind) -> ClassifierModel {
    let mut c = ClassifierConfig::new(12, 3);
    c.dim = 4;
    c.encoder = encoder;
    c.init_range = 0.5;
    c.seed = 9;
    ClassifierModel::new(c)
}

fn params(model: &ClassifierModel) -> Vec<Tensor> {
    model.params.iter().map(|(_, t)| t.clone()).collect()
}

#[test]
fn classifier_with_combined_loss() {
    for encoder in [EncoderKind::Attention, EncoderKind::FeedForward] {
        let model = classifier(encoder);
        let ids = [5, 6, 7, 8, 0];
        let masked = [5, 4, 7, 4, 0];
        let report = finite_diff_check(
            |tape, vars| {
                let bound = BoundParams::from_vars(vars.to_vec());
                let orig = model.forward_ids(tape, &bound, &ids).expect("forward").logits;
                let unbias = model.forward_ids(tape, &bound, &masked).expect("forward").logits;
                Ok(combined_loss_var(tape, orig, Some(unbias), 1, 1.5).expect("loss").total)
            },
            &params(&model),
            EPS,
        )
        .unwrap();
        assert!(report.checked > 50, "{report:?}");
        assert!(report.max_rel_error < TOL, "{encoder:?}: {report:?}");
    }
}

#[test]
fn classifier_with_baseline_losses() {
    let model = classifier(EncoderKind::Attention);
    let ids = [9, 5, 10, 0];
    let p_bias = [0.7, 0.2, 0.1];
    let losses: [&dyn Fn(&mut Tape, Var) -> Var; 3] = [
        &|tape, logits| er_loss_var(tape, &p_bias, logits, 0).unwrap(),
        &|tape, logits| poe_loss_var(tape, &p_bias, logits, 2, PoeForm::LogSpace).unwrap(),
        &|tape, logits| poe_loss_var(tape, &p_bias, logits, 1, PoeForm::ProbabilitySum).unwrap(),
    ];
    for loss in losses {
        let report = finite_diff_check(
            |tape, vars| {
                let bound = BoundParams::from_vars(vars.to_vec());
                let logits = model.forward_ids(tape, &bound, &ids).expect("forward").logits;
                Ok(loss(tape, logits))
            },
            &params(&model),
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "{report:?}");
    }
}

#[test]
fn bias_only_model() {
    let mut c = BiasOnlyConfig::new(2, 3, 3);
    c.hidden = 5;
    let model = BiasOnlyModel::new(c);
    let features = [0.3, -0.2, 0.9, 0.0, 0.5, -1.1];
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = finite_diff_check(
        |tape, vars| {
            let bound = BoundParams::from_vars(vars.to_vec());
            let logits = model.forward_tape(tape, &bound, &features).expect("forward");
            let lp = tape.log_softmax_rows(logits)?;
            let picked = tape.pick(lp, 2)?;
            tape.scale(picked, -1.0)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

fn tape_value(f: impl FnOnce(&mut Tape, Var) -> Var, logits: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(logits.to_vec()));
    let out = f(&mut tape, v);
    tape.scalar(out)
}

#[test]
fn tape_losses_agree_with_scalar_losses() {
    let orig = [0.4, -1.2, 2.0];
    let unbias = [1.0, 0.3, -0.5];
    let p_bias = [0.6, 0.3, 0.1];
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(orig.to_vec()));
    let b = tape.leaf(Tensor::vector(unbias.to_vec()));
    let terms = combined_loss_var(&mut tape, a, Some(b), 2, 0.7).unwrap();
    assert!((tape.scalar(terms.total) - combined_loss(&orig, &unbias, 2, 0.7).unwrap()).abs() < 1e-12);
    assert!((terms.ce - cross_entropy(&orig, 2).unwrap()).abs() < 1e-12);

    let er = tape_value(|t, v| er_loss_var(t, &p_bias, v, 1).unwrap(), &orig);
    assert!((er - er_loss(&p_bias, &softmax(&orig), 1).unwrap()).abs() < 1e-12);

    let logits_bias: Vec<f64> = p_bias.iter().map(|p: &f64| p.ln()).collect();
    for form in [PoeForm::LogSpace, PoeForm::ProbabilitySum] {
        let poe = tape_value(|t, v| poe_loss_var(t, &p_bias, v, 0, form).unwrap(), &orig);
        assert!((poe - poe_loss(&logits_bias, &orig, 0, form).unwrap()).abs() < 1e-12, "{form:?}");
    }
}

#[test]
fn unmasked_draw_reduces_to_cross_entropy() {
    let orig = [0.4, -1.2, 2.0];
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(orig.to_vec()));
    let terms = combined_loss_var(&mut tape, a, None, 0, 1.5).unwrap();
    assert_eq!(terms.jsd, 0.0);
    assert!((tape.scalar(terms.total) - cross_entropy(&orig, 0).unwrap()).abs() < 1e-12);
}
