use wavediffur::networks::gradcheck::{check_cross_attention, check_cshr, check_csp, check_denoiser, GradCheckReport};
use wavediffur::networks::ArchConfig;

fn show(r: &GradCheckReport) {
    println!(
        "{}: checked {} failures {} max rel {:.3e} worst {}",
        r.block, r.checked, r.failures, r.max_rel_err, r.worst
    );
    assert!(r.passed(), "{} failed", r.block);
    assert!(r.checked >= 100);
}

#[test]
fn denoiser_gradients() {
    show(&check_denoiser(&ArchConfig::default(), 120, 1).unwrap());
}

#[test]
fn cross_attention_gradients() {
    show(&check_cross_attention(&ArchConfig::default(), 120, 2).unwrap());
}

#[test]
fn csp_gradients() {
    show(&check_csp(&ArchConfig::default(), 120, 3).unwrap());
}

#[test]
fn cshr_gradients() {
    show(&check_cshr(&ArchConfig::default(), 120, 4).unwrap());
}
