//! Every differentiable primitive against central finite differences in
//! 64-bit, twenty random instances each.

mod support;

use support::grad::{case, run_case, INSTANCES, TOL};

fn assert_case(name: &'static str) {
    let r = run_case(name, case(name));
    assert!(
        r.passes(),
        "{name}: max relative error {:.3e} over {} probes in {} instances, weakest gradient {:.3e} (tolerance {TOL:e}, need {INSTANCES})",
        r.max_rel_error,
        r.checked,
        r.instances,
        r.min_instance_grad
    );
}

macro_rules! grad_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                assert_case(stringify!($name));
            }
        )*
    };
}

grad_tests!(
    add, sub, mul, scale, scale_by, silu, sum, mean, mse, reshape, permute, transpose, slice, concat, add_row, mul_row,
    mean_last, linear, conv3d, causal_conv3d, conv2d, group_norm, layer_norm, attention, attention_extended_kv, rope,
    fuse_hand_tokens, extend_sequence, adapter_residual, adapter_weights, codec, end_to_end_loss,
);

#[test]
fn patchify() {
    assert_case("patchify3d");
}
