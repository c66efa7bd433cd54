use regionedit::config::ExperimentConfig;
use regionedit::harness::ablation::eval_samples;
use regionedit::harness::{sample_metrics, Editor, MaskSource, Workspace};
use regionedit::latent::Grid;
use regionedit::model::{EditMasks, Regime, Variant};
use regionedit::synthdata::{EditSample, Split};

fn workspace() -> Workspace {
    Workspace::new(ExperimentConfig::micro(), None).unwrap()
}

fn outputs(ws: &Workspace, v: Variant, samples: &[&EditSample], src: &MaskSource) -> Vec<Vec<f32>> {
    let ck = ws.trained(v, Regime::Decoupled, 1).unwrap();
    let ed = Editor { model: &ck.model, store: &ck.store, variant: v, eval: &ws.cfg.eval, post: &ws.cfg.mask };
    ed.sample_edit(samples, src).unwrap().into_iter().map(|o| o.output.data).collect()
}

#[test]
fn supplying_the_gt_mask_equals_the_gt_source() {
    let ws = workspace();
    let samples = eval_samples(&ws, Split::Test).unwrap();
    let hi: Vec<Grid> = samples.iter().map(|s| s.mask_hi.clone()).collect();
    let a = outputs(&ws, Variant::G, &samples, &MaskSource::Gt);
    let b = outputs(&ws, Variant::G, &samples, &MaskSource::Supplied(hi));
    assert_eq!(a, b);
}

#[test]
fn empty_supplied_masks_fall_back_to_the_backbone() {
    let ws = workspace();
    let samples = eval_samples(&ws, Split::Test).unwrap();
    let (h, w) = (ws.cfg.model.gen_h(), ws.cfg.model.gen_w());
    let empty = vec![Grid::zeros(h, w); samples.len()];
    let adapted = outputs(&ws, Variant::G, &samples, &MaskSource::Supplied(empty));
    let plain = outputs(&ws, Variant::A, &samples, &MaskSource::Gt);
    assert_eq!(adapted, plain);
}

#[test]
fn sampling_is_deterministic_and_batch_independent() {
    let ws = workspace();
    let samples = eval_samples(&ws, Split::Test).unwrap();
    let all = outputs(&ws, Variant::G, &samples, &MaskSource::Predicted);
    assert_eq!(all, outputs(&ws, Variant::G, &samples, &MaskSource::Predicted));
    let one = outputs(&ws, Variant::G, &samples[2..3], &MaskSource::Predicted);
    assert_eq!(one[0], all[2]);
}

#[test]
fn predicted_source_needs_a_predictor() {
    let ws = workspace();
    let samples = eval_samples(&ws, Split::Test).unwrap();
    let ck = ws.trained(Variant::E, Regime::Decoupled, 1).unwrap();
    let ed = Editor { model: &ck.model, store: &ck.store, variant: Variant::E, eval: &ws.cfg.eval, post: &ws.cfg.mask };
    assert!(ed.sample_edit(&samples, &MaskSource::Predicted).is_err());
    assert!(ed.predict_masks(&samples).is_err());
}

#[test]
fn metrics_of_reference_outputs() {
    let ws = workspace();
    let cfg = &ws.cfg.model;
    for s in ws.corpus().unwrap().get(Split::Val) {
        let gt = EditMasks::from_hi(&s.mask_hi, cfg).unwrap().bin;
        let perfect = sample_metrics(&s.target, s, &gt, Some(&gt));
        assert_eq!((perfect.l1_global, perfect.l2_global), (0.0, 0.0));
        assert_eq!(perfect.l1_edit.unwrap_or(0.0), 0.0);
        assert_eq!((perfect.iou, perfect.dice), (Some(1.0), Some(1.0)));

        // Copying the source leaves the unedited region exactly right.
        let copy = sample_metrics(&s.source, s, &gt, None);
        assert_eq!(copy.l1_keep.unwrap_or(0.0), 0.0);
        assert!(copy.iou.is_none());
    }
}

#[test]
fn region_errors_recombine_into_the_global_error() {
    let ws = workspace();
    let cfg = &ws.cfg.model;
    let samples = eval_samples(&ws, Split::Test).unwrap();
    let ck = ws.trained(Variant::D, Regime::Decoupled, 1).unwrap();
    let ed = Editor { model: &ck.model, store: &ck.store, variant: Variant::D, eval: &ws.cfg.eval, post: &ws.cfg.mask };
    for (s, out) in samples.iter().zip(ed.sample_edit(&samples, &MaskSource::Gt).unwrap()) {
        let gt = EditMasks::from_hi(&s.mask_hi, cfg).unwrap().bin;
        let m = sample_metrics(&out.output, s, &gt, None);
        let n = (m.n_keep + m.n_edit) as f64;
        let parts = m.l1_keep_vs_target.unwrap_or(0.0) * m.n_keep as f64 + m.l1_edit.unwrap_or(0.0) * m.n_edit as f64;
        assert!((parts / n - m.l1_global).abs() <= 1e-12 * m.l1_global.max(1.0));
        assert_eq!(m.n_keep + m.n_edit, cfg.tokens() * cfg.channels);
    }
}
