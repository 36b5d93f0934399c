//! Cross-plane aggregation over rolled-out tri-plane maps and the 3D-aware
//! convolution built on top of it. Plane order and axis bookkeeping follow
//! the tri-plane projection convention: plane `uv` stores u along columns and
//! v along rows, `wu` stores w along columns and u along rows, `vw` stores v
//! along columns and w along rows.

use crate::numerics::{Graph, NodeId, NumericsError, PoolAxis, Real, Tensor};

type Res = Result<NodeId, NumericsError>;

/// Validate a `[r, 3r, c]` rolled-out shape and return `(r, c)`.
pub fn rolled_dims(shape: &[usize]) -> Result<(usize, usize), NumericsError> {
    if shape.len() == 3 && shape[1] == 3 * shape[0] && shape[0] > 0 && shape[2] > 0 {
        Ok((shape[0], shape[2]))
    } else {
        Err(NumericsError::ShapeMismatch {
            op: "rolled_dims",
            axis: "w",
            detail: format!("{shape:?} is not [r, 3r, c]"),
        })
    }
}

/// The per-plane texel of a rolled map, `k` indexing plane order uv, wu, vw.
fn texel(rolled: &[Real], r: usize, c: usize, k: usize, row: usize, col: usize, ch: usize) -> Real {
    rolled[(row * 3 * r + k * r + col) * c + ch]
}

/// For one target plane of a rolled-out map, return `(own, agg1, agg2)`,
/// each `[r, r, c]`. `own` is the target plane itself; `agg1` pools the next
/// plane (cyclic order) over its columns and lands the result in the target's
/// columns; `agg2` pools the previous plane over its rows and lands in the
/// target's rows. With the projection convention above, both aggregates pool
/// across exactly the 3D axis the target plane integrates away: a 3D point
/// (u, v, w) touches uv at (row v, col u), wu at (row u, col w) and vw at
/// (row w, col v), so e.g. the uv texel (v, u) receives the w-mean of wu's
/// row u and the w-mean of vw's column v.
pub fn axis_align_maps(
    rolled: &Tensor,
    target: usize,
) -> Result<(Tensor, Tensor, Tensor), NumericsError> {
    let (r, c) = rolled_dims(rolled.shape())?;
    if target >= 3 {
        return Err(NumericsError::ShapeMismatch {
            op: "axis_align_maps",
            axis: "plane",
            detail: format!("target index {target} out of range"),
        });
    }
    let data = rolled.data();
    let src1 = (target + 1) % 3;
    let src2 = (target + 2) % 3;

    let mut own = vec![0.0; r * r * c];
    for row in 0..r {
        for col in 0..r {
            for ch in 0..c {
                own[(row * r + col) * c + ch] = texel(data, r, c, target, row, col, ch);
            }
        }
    }

    // m1[j] = mean over src1's columns at row j; lands in target column j.
    let mut m1 = vec![0.0; r * c];
    for row in 0..r {
        for col in 0..r {
            for ch in 0..c {
                m1[row * c + ch] += texel(data, r, c, src1, row, col, ch);
            }
        }
    }
    for v in m1.iter_mut() {
        *v /= r as Real;
    }
    // m2[i] = mean over src2's rows at column i; lands in target row i.
    let mut m2 = vec![0.0; r * c];
    for row in 0..r {
        for col in 0..r {
            for ch in 0..c {
                m2[col * c + ch] += texel(data, r, c, src2, row, col, ch);
            }
        }
    }
    for v in m2.iter_mut() {
        *v /= r as Real;
    }

    let mut a1 = vec![0.0; r * r * c];
    let mut a2 = vec![0.0; r * r * c];
    for row in 0..r {
        for col in 0..r {
            for ch in 0..c {
                a1[(row * r + col) * c + ch] = m1[col * c + ch];
                a2[(row * r + col) * c + ch] = m2[row * c + ch];
            }
        }
    }
    Ok((
        Tensor::from_vec(&[r, r, c], own)?,
        Tensor::from_vec(&[r, r, c], a1)?,
        Tensor::from_vec(&[r, r, c], a2)?,
    ))
}

/// Slice a rolled-out node into its three `[r, r, c]` plane nodes.
pub fn split_planes(g: &mut Graph, x: NodeId) -> Result<[NodeId; 3], NumericsError> {
    let (r, _) = rolled_dims(g.shape(x))?;
    Ok([
        g.slice_w(x, 0, r)?,
        g.slice_w(x, r, r)?,
        g.slice_w(x, 2 * r, r)?,
    ])
}

/// Graph counterpart of the two aggregates of [`axis_align_maps`] for target
/// plane `i`, given the already-split plane nodes.
pub fn aggregate_pair(
    g: &mut Graph,
    planes: &[NodeId; 3],
    i: usize,
) -> Result<(NodeId, NodeId), NumericsError> {
    let s = g.shape(planes[i]);
    let (h, w) = (s[0], s[1]);
    let p1 = planes[(i + 1) % 3];
    let p2 = planes[(i + 2) % 3];
    let m1 = g.axis_mean(p1, PoolAxis::Cols)?;
    let m1t = g.transpose_hw(m1)?;
    let a1 = g.replicate_rows(m1t, h)?;
    let m2 = g.axis_mean(p2, PoolAxis::Rows)?;
    let m2t = g.transpose_hw(m2)?;
    let a2 = g.replicate_cols(m2t, w)?;
    Ok((a1, a2))
}

/// 3D-aware convolution of a rolled-out map: per plane, concatenate the
/// plane's own features with the two cross-plane aggregates along channels,
/// convolve with a single kernel shared by all three planes, and re-stack the
/// outputs horizontally. The kernel takes 3c input channels: the first c see
/// the plane itself, the rest see the aggregates.
pub fn conv3daware(
    g: &mut Graph,
    x: NodeId,
    kern: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    pad: usize,
) -> Res {
    let planes = split_planes(g, x)?;
    let mut outs = Vec::with_capacity(3);
    for i in 0..3 {
        let (a1, a2) = aggregate_pair(g, &planes, i)?;
        let cat = g.concat_last(&[planes[i], a1, a2])?;
        outs.push(g.conv2d(cat, kern, bias, stride, pad)?);
    }
    g.concat_w(&outs)
}

/// Plain per-plane convolution of a rolled-out map with one shared kernel;
/// planes never mix and the convolution window never crosses a plane seam.
pub fn conv_per_plane(
    g: &mut Graph,
    x: NodeId,
    kern: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    pad: usize,
) -> Res {
    let planes = split_planes(g, x)?;
    let mut outs = Vec::with_capacity(3);
    for &p in planes.iter() {
        outs.push(g.conv2d(p, kern, bias, stride, pad)?);
    }
    g.concat_w(&outs)
}

/// Per-plane bilinear resize of a rolled-out map to plane resolution `out`.
pub fn resize_per_plane(g: &mut Graph, x: NodeId, out: usize) -> Res {
    let planes = split_planes(g, x)?;
    let mut outs = Vec::with_capacity(3);
    for &p in planes.iter() {
        outs.push(g.resize_bilinear(p, out, out)?);
    }
    g.concat_w(&outs)
}

/// Repack `[r, 3r, c]` into the channel-stacked `[r, r, 3c]` layout.
pub fn fold_planes(g: &mut Graph, x: NodeId) -> Res {
    let planes = split_planes(g, x)?;
    g.concat_last(&planes)
}

/// Exact inverse of [`fold_planes`].
pub fn unfold_planes(g: &mut Graph, x: NodeId) -> Res {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != s[1] || s[2] % 3 != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "unfold_planes",
            axis: "c",
            detail: format!("{s:?} is not [r, r, 3c]"),
        });
    }
    let c = s[2] / 3;
    let p0 = g.slice_last(x, 0, c)?;
    let p1 = g.slice_last(x, c, c)?;
    let p2 = g.slice_last(x, 2 * c, c)?;
    g.concat_w(&[p0, p1, p2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rolled(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..r * 3 * r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[r, 3 * r, c], data).unwrap()
    }

    #[test]
    fn constant_planes_aggregate_to_the_same_constant() {
        let rolled = Tensor::full(&[4, 12, 2], 0.5);
        for target in 0..3 {
            let (own, a1, a2) = axis_align_maps(&rolled, target).unwrap();
            for &v in own.data().iter().chain(a1.data()).chain(a2.data()) {
                assert_eq!(v, 0.5);
            }
        }
    }

    #[test]
    fn pooled_line_lands_in_exactly_one_target_column() {
        // Plane wu holds u along rows; make only the u=2 line nonzero. Its
        // w-mean must appear in column u=2 of the uv target and nowhere else.
        let r = 4;
        let mut data = vec![0.0; r * 3 * r];
        for col in 0..r {
            data[2 * 3 * r + r + col] = (col + 1) as Real; // plane 1, row 2
        }
        let rolled = Tensor::from_vec(&[r, 3 * r, 1], data).unwrap();
        let (_, a1, a2) = axis_align_maps(&rolled, 0).unwrap();
        for row in 0..r {
            for col in 0..r {
                let want = if col == 2 { 2.5 } else { 0.0 };
                assert_eq!(a1.data()[row * r + col], want, "agg1 at ({row},{col})");
                assert_eq!(a2.data()[row * r + col], 0.0);
            }
        }
    }

    #[test]
    fn aggregates_are_constant_along_the_replicated_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (r, c) = (6, 3);
        let rolled = random_rolled(r, c, &mut rng);
        for target in 0..3 {
            let (_, a1, a2) = axis_align_maps(&rolled, target).unwrap();
            for row in 0..r {
                for col in 0..r {
                    for ch in 0..c {
                        assert_eq!(
                            a1.data()[(row * r + col) * c + ch],
                            a1.data()[col * c + ch]
                        );
                        assert_eq!(
                            a2.data()[(row * r + col) * c + ch],
                            a2.data()[(row * r) * c + ch]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn graph_aggregates_match_the_plain_routine() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rolled = random_rolled(5, 2, &mut rng);
        for target in 0..3 {
            let (_, a1, a2) = axis_align_maps(&rolled, target).unwrap();
            let mut g = Graph::fast();
            let x = g.input(rolled.clone()).unwrap();
            let planes = split_planes(&mut g, x).unwrap();
            let (ga1, ga2) = aggregate_pair(&mut g, &planes, target).unwrap();
            assert_eq!(g.value(ga1).data(), a1.data());
            assert_eq!(g.value(ga2).data(), a2.data());
        }
    }

    /// Direct dense convolution used as the reference in oracle tests.
    fn conv_ref(
        x: &[Real],
        (h, w, cin): (usize, usize, usize),
        k: &[Real],
        (kh, kw, cout): (usize, usize, usize),
        b: &[Real],
        stride: usize,
        pad: usize,
    ) -> Vec<Real> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; oh * ow * cout];
        for or in 0..oh {
            for oc in 0..ow {
                for co in 0..cout {
                    let mut acc = b[co];
                    for dr in 0..kh {
                        for dc in 0..kw {
                            let ir = (or * stride + dr) as isize - pad as isize;
                            let ic = (oc * stride + dc) as isize - pad as isize;
                            if ir < 0 || ic < 0 || ir >= h as isize || ic >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[((ir as usize) * w + ic as usize) * cin + ci]
                                    * k[((dr * kw + dc) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(or * ow + oc) * cout + co] = acc;
                }
            }
        }
        out
    }

    /// Loop oracle for the 3D-aware conv, written from voxel correspondence:
    /// a 3D point (u, v, w) touches uv at (v, u), wu at (u, w), vw at (w, v).
    fn aware_oracle(
        rolled: &Tensor,
        kern: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Vec<Vec<Real>> {
        let (r, c) = rolled_dims(rolled.shape()).unwrap();
        let d = rolled.data();
        let ks = kern.shape();
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let mut outs = Vec::new();
        for target in 0..3 {
            let mut cat = vec![0.0; r * r * 3 * c];
            for row in 0..r {
                for col in 0..r {
                    for ch in 0..c {
                        let own = texel(d, r, c, target, row, col, ch);
                        let (a1, a2) = match target {
                            // uv texel (v=row, u=col)
                            0 => {
                                let mut s1 = 0.0; // wu row u=col, all w
                                let mut s2 = 0.0; // vw col v=row, all w
                                for iw in 0..r {
                                    s1 += texel(d, r, c, 1, col, iw, ch);
                                    s2 += texel(d, r, c, 2, iw, row, ch);
                                }
                                (s1 / r as Real, s2 / r as Real)
                            }
                            // wu texel (u=row, w=col)
                            1 => {
                                let mut s1 = 0.0; // vw row w=col, all v
                                let mut s2 = 0.0; // uv col u=row, all v
                                for iv in 0..r {
                                    s1 += texel(d, r, c, 2, col, iv, ch);
                                    s2 += texel(d, r, c, 0, iv, row, ch);
                                }
                                (s1 / r as Real, s2 / r as Real)
                            }
                            // vw texel (w=row, v=col)
                            _ => {
                                let mut s1 = 0.0; // uv row v=col, all u
                                let mut s2 = 0.0; // wu col w=row, all u
                                for iu in 0..r {
                                    s1 += texel(d, r, c, 0, col, iu, ch);
                                    s2 += texel(d, r, c, 1, iu, row, ch);
                                }
                                (s1 / r as Real, s2 / r as Real)
                            }
                        };
                        let base = (row * r + col) * 3 * c;
                        cat[base + ch] = own;
                        cat[base + c + ch] = a1;
                        cat[base + 2 * c + ch] = a2;
                    }
                }
            }
            outs.push(conv_ref(
                &cat,
                (r, r, 3 * c),
                kern.data(),
                (kh, kw, cout),
                bias.data(),
                stride,
                pad,
            ));
        }
        outs
    }

    #[test]
    fn aware_conv_matches_the_voxel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c, cout, stride) in
            &[(4, 2, 3, 1), (8, 3, 2, 1), (8, 2, 4, 2), (6, 4, 3, 1)]
        {
            let rolled = random_rolled(r, c, &mut rng);
            let kern = Tensor::randn(&[3, 3, 3 * c, cout], 0.5, &mut rng);
            let bias = Tensor::randn(&[cout], 0.5, &mut rng);
            let want = aware_oracle(&rolled, &kern, &bias, stride, 1);

            let mut g = Graph::fast();
            let x = g.input(rolled).unwrap();
            let k = g.input(kern).unwrap();
            let b = g.input(bias).unwrap();
            let out = conv3daware(&mut g, x, k, Some(b), stride, 1).unwrap();
            let os = g.shape(out).to_vec();
            let or = (r + 2 - 3) / stride + 1;
            assert_eq!(os, [or, 3 * or, cout]);
            let got = g.value(out).data();
            for (pi, plane) in want.iter().enumerate() {
                for row in 0..or {
                    for col in 0..or {
                        for ch in 0..cout {
                            let gv = got[(row * 3 * or + pi * or + col) * cout + ch];
                            let wv = plane[(row * or + col) * cout + ch];
                            assert!(
                                (gv - wv).abs() < 1e-10,
                                "plane {pi} ({row},{col},{ch}): {gv} vs {wv}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_aggregation_channels_reduce_to_per_plane_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (r, c, cout) = (6, 3, 4);
        let rolled = random_rolled(r, c, &mut rng);
        let mut kd = Tensor::randn(&[3, 3, 3 * c, cout], 0.5, &mut rng);
        let mut kc = vec![0.0; 3 * 3 * c * cout];
        for dr in 0..3 {
            for dc in 0..3 {
                for ci in 0..3 * c {
                    for co in 0..cout {
                        let idx = ((dr * 3 + dc) * 3 * c + ci) * cout + co;
                        if ci < c {
                            kc[((dr * 3 + dc) * c + ci) * cout + co] = kd.data()[idx];
                        } else {
                            kd.data_mut()[idx] = 0.0;
                        }
                    }
                }
            }
        }
        let kc = Tensor::from_vec(&[3, 3, c, cout], kc).unwrap();
        let bias = Tensor::randn(&[cout], 0.5, &mut rng);

        let mut g = Graph::fast();
        let x = g.input(rolled).unwrap();
        let kdn = g.input(kd).unwrap();
        let kcn = g.input(kc).unwrap();
        let bn = g.input(bias).unwrap();
        let aware = conv3daware(&mut g, x, kdn, Some(bn), 1, 1).unwrap();
        let plain = conv_per_plane(&mut g, x, kcn, Some(bn), 1, 1).unwrap();
        assert_eq!(g.value(aware).data(), g.value(plain).data());
    }

    #[test]
    fn fold_and_unfold_are_inverse_bijections() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rolled = random_rolled(5, 4, &mut rng);
        let mut g = Graph::fast();
        let x = g.input(rolled.clone()).unwrap();
        let folded = fold_planes(&mut g, x).unwrap();
        assert_eq!(g.shape(folded), [5, 5, 12]);
        // Channel blocks of the folded map are the planes in order.
        let f = g.value(folded).data().to_vec();
        for row in 0..5 {
            for col in 0..5 {
                for k in 0..3 {
                    for ch in 0..4 {
                        assert_eq!(
                            f[(row * 5 + col) * 12 + k * 4 + ch],
                            texel(rolled.data(), 5, 4, k, row, col, ch)
                        );
                    }
                }
            }
        }
        let back = unfold_planes(&mut g, folded).unwrap();
        assert_eq!(g.value(back).data(), rolled.data());
    }

    #[test]
    fn aware_conv_passes_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (r, c, cout) = (4, 2, 2);
        let params = vec![
            random_rolled(r, c, &mut rng),
            Tensor::randn(&[3, 3, 3 * c, cout], 0.4, &mut rng),
            Tensor::randn(&[cout], 0.4, &mut rng),
        ];
        let err = gradcheck::max_grad_rel_err(&params, gradcheck::FD_STEP, &|g, ids| {
            let y = conv3daware(g, ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
            let sq = g.square(y).unwrap();
            g.mean_all(sq).unwrap()
        });
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn malformed_rolled_shapes_are_rejected() {
        let t = Tensor::zeros(&[4, 8, 2]);
        assert!(axis_align_maps(&t, 0).is_err());
        let t = Tensor::zeros(&[4, 12, 2]);
        assert!(axis_align_maps(&t, 3).is_err());
    }
}
