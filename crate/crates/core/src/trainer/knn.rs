//! Exact k-nearest-neighbour distances with a static k-d tree.

use nalgebra::Vector3;

struct Node {
    point: usize,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

fn build(points: &[Vector3<f64>], idx: &mut [usize], depth: usize) -> Option<Box<Node>> {
    if idx.is_empty() {
        return None;
    }
    let axis = depth % 3;
    idx.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let mid = idx.len() / 2;
    let point = idx[mid];
    let (l, r) = idx.split_at_mut(mid);
    Some(Box::new(Node {
        point,
        axis,
        left: build(points, l, depth + 1),
        right: build(points, &mut r[1..], depth + 1),
    }))
}

/// Keeps the `k` smallest squared distances, sorted ascending.
fn search(node: &Option<Box<Node>>, points: &[Vector3<f64>], q: usize, k: usize, best: &mut Vec<f64>) {
    let Some(n) = node else { return };
    if n.point != q {
        let d = (points[n.point] - points[q]).norm_squared();
        if best.len() < k || d < *best.last().unwrap() {
            let pos = best.partition_point(|&x| x <= d);
            best.insert(pos, d);
            best.truncate(k);
        }
    }
    let diff = points[q][n.axis] - points[n.point][n.axis];
    let (near, far) = if diff < 0.0 { (&n.left, &n.right) } else { (&n.right, &n.left) };
    search(near, points, q, k, best);
    if best.len() < k || diff * diff < *best.last().unwrap() {
        search(far, points, q, k, best);
    }
}

/// Mean Euclidean distance from each point to its `k` nearest other points.
/// Points with fewer than `k` neighbours average over what exists; a lone
/// point gets 0.
pub fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    let root = build(points, &mut idx, 0);
    (0..points.len())
        .map(|q| {
            let mut best = Vec::with_capacity(k + 1);
            search(&root, points, q, k, &mut best);
            if best.is_empty() {
                0.0
            } else {
                best.iter().map(|d| d.sqrt()).sum::<f64>() / best.len() as f64
            }
        })
        .collect()
}
