mod support;

use support::gradcheck::{self, TOL};

macro_rules! gradient_tests {
    ($($name:ident),* $(,)?) => {$(
        #[test]
        fn $name() {
            let worst = gradcheck::$name();
            assert!(worst < TOL, "worst relative error {worst:e}");
        }
    )*};
}

gradient_tests!(
    conv2d,
    batchnorm_training,
    linear,
    global_avgpool,
    relu,
    softmax_cross_entropy_loss,
    gamma_penalties,
    group_lasso,
    plain_network_end_to_end,
    residual_network_end_to_end,
);
