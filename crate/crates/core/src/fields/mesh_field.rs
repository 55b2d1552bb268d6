use super::OccupancyField;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, MeshIndex, Point3, TriangleMesh, Vec3};

/// Indicator of a watertight mesh's interior.
///
/// `grad` is the negated signed-distance gradient (unit, pointing into the
/// solid), computed from the closest surface point.
#[derive(Debug, Clone)]
pub struct MeshField {
    index: MeshIndex,
    bbox: BoundingBox,
}

impl MeshField {
    pub fn new(mesh: TriangleMesh) -> Result<Self> {
        mesh.validate()?;
        let bbox = mesh
            .bbox()
            .ok_or_else(|| Error::InvalidMesh("mesh field needs at least one vertex".into()))?;
        Ok(MeshField {
            index: MeshIndex::new(mesh),
            bbox,
        })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        self.index.mesh()
    }

    pub fn index(&self) -> &MeshIndex {
        &self.index
    }
}

impl OccupancyField for MeshField {
    fn eval(&self, p: &Point3) -> f64 {
        if !self.bbox.contains(p) {
            return 0.0;
        }
        self.index.point_in_mesh(p).is_inside() as u8 as f64
    }

    fn grad(&self, p: &Point3) -> Vec3 {
        self.index
            .signed_distance(p)
            .map(|(_, g)| -g)
            .unwrap_or_else(Vec3::zeros)
    }

    fn bbox(&self) -> BoundingBox {
        self.bbox
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::AnalyticField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_cube_mesh_field() {
        let m = TriangleMesh::cuboid(&BoundingBox {
            min: [0.0; 3],
            max: [1.0; 3],
        });
        let f = MeshField::new(m).unwrap();
        assert_eq!(f.eval(&Point3::new(0.5, 0.5, 0.5)), 1.0);
        assert_eq!(f.eval(&Point3::new(2.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn icosphere_agrees_with_analytic_sphere() {
        let mesh = TriangleMesh::icosphere(Point3::zeros(), 0.5, 4);
        let chord = (mesh.vertices[mesh.faces[0][0]] - mesh.vertices[mesh.faces[0][1]]).norm() * 1.5;
        let f = MeshField::new(mesh).unwrap();
        let sphere = AnalyticField::sphere(Point3::zeros(), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut agree = 0;
        for _ in 0..10_000 {
            let p = BoundingBox::cube(0.6).lerp([rng.random(), rng.random(), rng.random()]);
            if f.eval(&p) == sphere.eval(&p) {
                agree += 1;
            } else {
                assert!((p.norm() - 0.5).abs() < chord, "disagreement far from surface at {p:?}");
            }
        }
        assert!(agree >= 9_900, "agreement {agree}");
    }

    #[test]
    fn gradient_points_inward() {
        let mesh = TriangleMesh::icosphere(Point3::zeros(), 0.5, 3);
        let f = MeshField::new(mesh).unwrap();
        let p = Point3::new(0.3, 0.1, -0.2);
        let g = f.grad(&p);
        assert!(g.dot(&-p.normalize()) > 0.99);
    }
}
