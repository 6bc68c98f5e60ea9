use interfacial::energy::bulk_density;
use interfacial::kinematics::{deformation_gradient, jacobians};
use interfacial::mesh::{format_mesh, parse_mesh};
use interfacial::par::pairwise_sum;
use interfacial::scenes::{clamped_cube, perturbed_slab, slab_labels, unit_cube};
use interfacial::topopt::mass_preserving_move;
use interfacial::varifold::{extract_reference_interface, varifold_mass};
use interfacial::{bulk_energy, extract_interface, DeformationState, EnergyModel, ExtendedReal, PhaseLabeling, TopOptConfig, Vec3};
use nalgebra::{Matrix3, Rotation3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform9(-1.0f64..1.0).prop_map(|a| Matrix3::identity() + 0.4 * Matrix3::from_row_slice(&a))
}

fn rotation() -> impl Strategy<Value = Rotation3<f64>> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..std::f64::consts::TAU).prop_filter_map("axis", |(a, angle)| {
        let axis = Vec3::from(a);
        (axis.norm() > 1e-3).then(|| Rotation3::new(axis.normalize() * angle))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_maps_have_constant_gradient(a in matrix(), shift in prop::array::uniform3(-2.0f64..2.0)) {
        let mesh = unit_cube(2).unwrap();
        let state = DeformationState::from_map(&mesh, |x| a * x + Vec3::from(shift)).unwrap();
        for t in 0..mesh.num_tets() {
            prop_assert!((deformation_gradient(&mesh, &state, t) - a).norm() < 1e-12);
        }
    }

    #[test]
    fn density_is_frame_indifferent(f in matrix(), q in rotation(), phase in 0u8..2) {
        let model = EnergyModel::default();
        prop_assume!(f.determinant() > 0.05);
        let w = bulk_density(&f, phase, &model).value();
        let wq = bulk_density(&(q.matrix() * f), phase, &model).value();
        prop_assert!((w - wq).abs() <= 1e-10 * w.abs().max(1.0), "{w} vs {wq}");
    }

    #[test]
    fn density_is_infinite_for_reversed_orientation(f in matrix()) {
        prop_assume!(f.determinant().abs() > 1e-6);
        let g = if f.determinant() < 0.0 { f } else { -f };
        prop_assert_eq!(bulk_density(&g, 1, &EnergyModel::default()), ExtendedReal::Infinite);
    }

    #[test]
    fn bulk_energy_ignores_rigid_motions(q in rotation(), shift in prop::array::uniform3(-1.0f64..1.0)) {
        let mesh = unit_cube(3).unwrap();
        let phases = slab_labels(&mesh, 0.5, 2);
        let model = EnergyModel::default();
        let stretch = Matrix3::from_diagonal(&Vec3::new(1.1, 0.9, 1.05));
        let base = DeformationState::from_map(&mesh, |x| stretch * x).unwrap();
        let moved = DeformationState::from_map(&mesh, |x| q * (stretch * x) + Vec3::from(shift)).unwrap();
        let (e0, e1) = (bulk_energy(&mesh, &base, &phases, &model).value(), bulk_energy(&mesh, &moved, &phases, &model).value());
        prop_assert!((e0 - e1).abs() <= 1e-10 * e0);
    }

    #[test]
    fn slab_interface_area_follows_cofactor(a in matrix()) {
        prop_assume!(a.determinant() > 0.1);
        let mesh = unit_cube(4).unwrap();
        let phases = slab_labels(&mesh, 0.5, 2);
        let state = DeformationState::from_map(&mesh, |x| a * x).unwrap();
        let v = extract_interface(&mesh, &state, &phases).unwrap();
        let cof = a.try_inverse().unwrap().transpose() * a.determinant();
        let expected = (cof * Vec3::z()).norm();
        prop_assert!((varifold_mass(&v) - expected).abs() < 1e-12 * expected.max(1.0));
        let n = (cof * Vec3::z()).normalize();
        for t in v.triangles() {
            prop_assert!((t.normal + n).norm() < 1e-9);
        }
    }

    #[test]
    fn complementary_labels_reverse_normals(seed in any::<u64>()) {
        let mesh = unit_cube(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = perturbed_slab(&mesh, 0.5, 2, 3, &mut rng);
        let q = PhaseLabeling::new(p.labels().iter().map(|&l| 1 - l).collect()).unwrap();
        let (vp, vq) = (extract_reference_interface(&mesh, &p).unwrap(), extract_reference_interface(&mesh, &q).unwrap());
        prop_assert!((varifold_mass(&vp) - varifold_mass(&vq)).abs() < 1e-12);
        let sum_p: Vec3 = vp.triangles().iter().map(|t| t.normal * t.area).sum();
        let sum_q: Vec3 = vq.triangles().iter().map(|t| t.normal * t.area).sum();
        prop_assert!((sum_p + sum_q).norm() < 1e-12);
    }

    #[test]
    fn moves_preserve_phase_count(seed in any::<u64>()) {
        let mesh = clamped_cube(4).unwrap();
        let model = EnergyModel::default();
        let config = TopOptConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phases = slab_labels(&mesh, 0.5, 2);
        for _ in 0..5 {
            phases = mass_preserving_move(&mesh, &phases, &model, &config, &mut rng).unwrap();
            prop_assert_eq!(phases.count_ones(), mesh.num_tets() / 2);
            prop_assert!(extract_reference_interface(&mesh, &phases).is_ok());
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_sum(values in prop::collection::vec(-1e3f64..1e3, 0..400)) {
        let naive: f64 = values.iter().sum();
        let bound = 1e-12 * values.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&values) - naive).abs() <= bound);
    }

    #[test]
    fn mesh_text_round_trips(n in 1usize..4, jitter in prop::array::uniform3(-0.05f64..0.05)) {
        let mesh = clamped_cube(n).unwrap();
        let mut parts = mesh.to_parts();
        for v in parts.vertices.iter_mut().skip(1) {
            *v += Vec3::from(jitter) / n as f64;
        }
        let (jittered, _) = interfacial::ReferenceMesh::from_parts(parts.clone()).unwrap();
        let back = parse_mesh(&format_mesh(&jittered)).unwrap();
        prop_assert_eq!(back, jittered.to_parts());
        prop_assert!(jacobians(&jittered, &DeformationState::identity(&jittered)).iter().all(|&d| d > 0.0));
    }
}
