//! Density-based clustering (DBSCAN) of 3D points.

use rayon::prelude::*;
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLabel {
    Noise,
    Cluster(usize),
}

fn neighbors(points: &[[f64; 3]], eps: f64) -> Vec<Vec<usize>> {
    let eps2 = eps * eps;
    points
        .par_iter()
        .map(|p| {
            points
                .iter()
                .enumerate()
                .filter(|(_, q)| {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    d2 <= eps2
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Labels every point. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`. Clusters are numbered in order of
/// their first core point.
pub fn dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<PointLabel> {
    let n = points.len();
    let adj = neighbors(points, eps);
    let mut labels: Vec<Option<PointLabel>> = vec![None; n];
    let mut next = 0;
    for p in 0..n {
        if labels[p].is_some() {
            continue;
        }
        if adj[p].len() < min_pts {
            labels[p] = Some(PointLabel::Noise);
            continue;
        }
        let c = next;
        next += 1;
        labels[p] = Some(PointLabel::Cluster(c));
        let mut queue: VecDeque<usize> = adj[p].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                Some(PointLabel::Noise) => labels[q] = Some(PointLabel::Cluster(c)),
                Some(PointLabel::Cluster(_)) => continue,
                None => {
                    labels[q] = Some(PointLabel::Cluster(c));
                    if adj[q].len() >= min_pts {
                        queue.extend(adj[q].iter().copied());
                    }
                }
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(PointLabel::Noise)).collect()
}

/// Positions (into `points`) of the members of the largest cluster; ties go
/// to the cluster found first. Empty when everything is noise.
pub fn largest_cluster(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<usize> {
    let labels = dbscan(points, eps, min_pts);
    let mut sizes: Vec<usize> = Vec::new();
    for l in &labels {
        if let PointLabel::Cluster(c) = *l {
            if sizes.len() <= c {
                sizes.resize(c + 1, 0);
            }
            sizes[c] += 1;
        }
    }
    let Some(best) = (0..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))) else {
        return Vec::new();
    };
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == PointLabel::Cluster(best))
        .map(|(i, _)| i)
        .collect()
}

/// Median distance from each point to its nearest other point.
pub fn median_nearest_neighbor(points: &[[f64; 3]]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut d: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    Some(if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blobs_and_noise() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push([i as f64 * 0.1, 0.0, 0.0]);
        }
        for i in 0..6 {
            pts.push([10.0 + i as f64 * 0.1, 0.0, 0.0]);
        }
        pts.push([-20.0, 0.0, 0.0]);
        let labels = dbscan(&pts, 0.15, 3);
        assert!(labels[..10].iter().all(|&l| l == PointLabel::Cluster(0)));
        assert!(labels[10..16].iter().all(|&l| l == PointLabel::Cluster(1)));
        assert_eq!(labels[16], PointLabel::Noise);
        assert_eq!(largest_cluster(&pts, 0.15, 3), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn border_points_join() {
        // chain end is within eps of a core point but has too few neighbours itself
        let pts = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0], [1.9, 0.0, 0.0]];
        let labels = dbscan(&pts, 1.0, 3);
        assert_eq!(labels, vec![PointLabel::Cluster(0); 4]);
    }

    #[test]
    fn median_nn() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(median_nearest_neighbor(&pts), Some(1.0));
        assert_eq!(median_nearest_neighbor(&pts[..1]), None);
    }
}
