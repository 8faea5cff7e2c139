use mpstream_autodiff::gradcheck::{cases, check};
use mpstream_autodiff::Tensor;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

macro_rules! fd_case {
    ($name:ident) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]
            #[test]
            fn $name(seed in any::<u64>()) {
                let report = cases::$name(seed).unwrap();
                prop_assert!(report.checked > 0);
                prop_assert!(report.max_rel <= TOL, "{report:?}");
            }
        }
    };
}

fd_case!(conv3d);
fd_case!(maxpool3d);
fd_case!(global_avg_pool);
fd_case!(batch_norm_train);
fd_case!(batch_norm_eval);
fd_case!(relu);
fd_case!(sigmoid);
fd_case!(fully_connected);
fd_case!(concat_channels);
fd_case!(dropout_train);
fd_case!(dropout_eval);
fd_case!(elementwise);
fd_case!(composite);

#[test]
fn kink_inside_the_step_is_resolved_by_a_smaller_step() {
    let x = Tensor::new(vec![3], vec![4e-6, -3e-6, 0.7]).unwrap();
    let report = check(&[x], cases::STEP, |g, v| Ok(g.sum(g.relu(v[0])?))).unwrap();
    assert!(report.max_rel <= 1e-9, "{report:?}");
}

#[test]
fn kink_at_the_point_itself_is_still_reported() {
    let x = Tensor::new(vec![1], vec![0.0]).unwrap();
    let report = check(&[x], cases::STEP, |g, v| Ok(g.sum(g.relu(v[0])?))).unwrap();
    assert!(report.max_rel > 0.4, "{report:?}");
}
