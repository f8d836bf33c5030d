use masksparsity::model::{
    build_plain_cnn, build_resnet_cifar, flops_count, param_count, resnet_cifar_specs, weighted_depth,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn resnet56_matches_published_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = build_resnet_cifar(9, 10, &mut rng).unwrap();
    let flops = flops_count(&g, (32, 32)).unwrap();
    let params = param_count(&g);
    println!("resnet-56: {flops} MACs, {params} params");
    assert!((123_500_000..=128_500_000).contains(&flops), "{flops}");
    assert!((845_000..=861_000).contains(&params), "{params}");
}

#[test]
fn resnet_depths() {
    for (n, depth) in [(1, 8), (9, 56), (18, 110)] {
        assert_eq!(weighted_depth(&resnet_cifar_specs(n, 3, 10).unwrap()), depth);
    }
}

#[test]
fn cost_grows_with_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = build_resnet_cifar(3, 10, &mut rng).unwrap();
    let b = build_resnet_cifar(9, 10, &mut rng).unwrap();
    assert!(flops_count(&a, (32, 32)).unwrap() < flops_count(&b, (32, 32)).unwrap());
    assert!(param_count(&a) < param_count(&b));
}

#[test]
fn flops_scale_with_resolution() {
    // no pooling before the head: every conv term scales with the pixel count
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = build_plain_cnn(&[8, 16], 10, &mut rng).unwrap();
    let head = 16 * 10;
    let small = flops_count(&g, (8, 8)).unwrap() - head;
    let large = flops_count(&g, (16, 16)).unwrap() - head;
    assert_eq!(large, 4 * small);
}

#[test]
fn undersized_input_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = build_resnet_cifar(1, 10, &mut rng).unwrap();
    assert!(flops_count(&g, (0, 0)).is_err());
}
