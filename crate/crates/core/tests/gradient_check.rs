mod common;

use common::gradcheck::{check, reduced_fixture};

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..10 {
        let r = check(&reduced_fixture(seed), 1e-4);
        println!(
            "seed {seed}: {} params, worst rel err {:e}, {} straddle a kink",
            r.params, r.worst_relative_error, r.kink_straddling
        );
        assert!(r.library_loss_matches_reference);
        assert!(r.worst_relative_error < 1e-4, "seed {seed}: {}", r.worst_relative_error);
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradients() {
    use avlex::net::{audio_backward, audio_forward_trace, image_backward, image_forward_trace};
    let f = reduced_fixture(3);
    let mut grads = f.params.zeros_like();
    let (e, trace) = audio_forward_trace(&f.captions[0], &f.params.audio).unwrap();
    audio_backward(&f.params.audio, &trace, &vec![0.0; e.dim()], &mut grads.audio);
    let (e, trace) = image_forward_trace(&f.features[0], &f.params.image).unwrap();
    image_backward(&trace, &vec![0.0; e.dim()], &mut grads.image);
    assert!(grads.views().iter().all(|v| v.data.iter().all(|&g| g == 0.0)));
}

#[test]
fn dead_relu_unit_gets_no_incoming_gradient() {
    use avlex::dsp::Spectrogram;
    use avlex::train::minibatch_objective;
    let mut f = reduced_fixture(4);
    // push hidden unit 2 of the first convolution far negative for every input
    f.params.audio.convs[0].bias[2] = -1e3;
    let caps: Vec<&Spectrogram> = f.captions.iter().collect();
    let feats: Vec<&[f64]> = f.features.iter().map(|v| v.as_slice()).collect();
    let (_, grads) = minibatch_objective(&f.params, &caps, &feats, &f.impostors, 1.0).unwrap();
    let c = &grads.audio.convs[0];
    let w = &c.weight[2 * c.in_ch * c.width..3 * c.in_ch * c.width];
    assert!(w.iter().all(|&g| g == 0.0));
    assert_eq!(c.bias[2], 0.0);
}
