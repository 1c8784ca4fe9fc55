"""Numba kernels behind `raster`.

Everything is float64 and scalar-per-gaussian or scalar-per-pixel, so results
do not depend on array layout, tile size or thread count. Pixel (row j,
column i) has its centre at (i + 0.5, j + 0.5).

Per-gaussian projection record layout:
    means2d   (n, 2)  pixel coordinates of the projected centre
    conics    (n, 3)  inverse of the regularized 2D covariance (a, b, c)
    radii     (n,)    half-width of the bounding square, 0 when culled
"""

import math

import numpy as np
from numba import njit, prange


@njit(cache=True, nogil=True)
def quaternion_to_matrix(w, x, y, z):
    rotation = np.empty((3, 3))
    rotation[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rotation[0, 1] = 2.0 * (x * y - w * z)
    rotation[0, 2] = 2.0 * (x * z + w * y)
    rotation[1, 0] = 2.0 * (x * y + w * z)
    rotation[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rotation[1, 2] = 2.0 * (y * z - w * x)
    rotation[2, 0] = 2.0 * (x * z - w * y)
    rotation[2, 1] = 2.0 * (y * z + w * x)
    rotation[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rotation


@njit(cache=True, nogil=True)
def _gaussian_frame(position, log_scale, rotation, view_rotation, view_translation):
    """View-space centre, unit quaternion, rotation, scales and 3D covariance"""
    t = np.empty(3)
    for i in range(3):
        t[i] = (
            view_rotation[i, 0] * position[0]
            + view_rotation[i, 1] * position[1]
            + view_rotation[i, 2] * position[2]
            + view_translation[i]
        )
    norm = math.sqrt(
        rotation[0] * rotation[0]
        + rotation[1] * rotation[1]
        + rotation[2] * rotation[2]
        + rotation[3] * rotation[3]
    )
    q = np.empty(4)
    for i in range(4):
        q[i] = rotation[i] / norm
    r = quaternion_to_matrix(q[0], q[1], q[2], q[3])
    s = np.empty(3)
    for k in range(3):
        s[k] = math.exp(log_scale[k])
    m = np.empty((3, 3))
    for i in range(3):
        for k in range(3):
            m[i, k] = r[i, k] * s[k]
    sigma = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            sigma[i, j] = m[i, 0] * m[j, 0] + m[i, 1] * m[j, 1] + m[i, 2] * m[j, 2]
    return t, norm, q, r, s, m, sigma


@njit(cache=True, nogil=True)
def _screen_transform(t, focal, view_rotation):
    """J (2x3) at view point t and T = J W_rot (2x3)"""
    jac = np.zeros((2, 3))
    jac[0, 0] = focal / t[2]
    jac[0, 2] = -focal * t[0] / (t[2] * t[2])
    jac[1, 1] = focal / t[2]
    jac[1, 2] = -focal * t[1] / (t[2] * t[2])
    transform = np.empty((2, 3))
    for i in range(2):
        for k in range(3):
            transform[i, k] = (
                jac[i, 0] * view_rotation[0, k]
                + jac[i, 1] * view_rotation[1, k]
                + jac[i, 2] * view_rotation[2, k]
            )
    return jac, transform


@njit(cache=True, nogil=True)
def _project_covariance(transform, sigma):
    """T Sigma T^T as (A, B, D)"""
    ts = np.empty((2, 3))
    for i in range(2):
        for k in range(3):
            ts[i, k] = (
                transform[i, 0] * sigma[0, k]
                + transform[i, 1] * sigma[1, k]
                + transform[i, 2] * sigma[2, k]
            )
    a = ts[0, 0] * transform[0, 0] + ts[0, 1] * transform[0, 1] + ts[0, 2] * transform[0, 2]
    b = ts[0, 0] * transform[1, 0] + ts[0, 1] * transform[1, 1] + ts[0, 2] * transform[1, 2]
    d = ts[1, 0] * transform[1, 0] + ts[1, 1] * transform[1, 1] + ts[1, 2] * transform[1, 2]
    return a, b, d


@njit(cache=True, nogil=True)
def extent_radius(a, b, d, extent_sigma):
    """k_sigma times the largest standard deviation of a 2x2 covariance"""
    mid = 0.5 * (a + d)
    det = a * d - b * b
    largest = mid + math.sqrt(max(0.0, mid * mid - det))
    return extent_sigma * math.sqrt(largest)


@njit(cache=True, nogil=True, parallel=True)
def project_gaussians(
    positions,
    log_scales,
    rotations,
    opacity_logits,
    view_rotation,
    view_translation,
    focal,
    cx,
    cy,
    near,
    blur,
    extent_sigma,
):
    n = positions.shape[0]
    means2d = np.zeros((n, 2))
    covariances = np.zeros((n, 3))
    conics = np.zeros((n, 3))
    depths = np.zeros(n)
    radii = np.zeros(n)
    opacities = np.zeros(n)
    for g in prange(n):
        opacities[g] = 1.0 / (1.0 + math.exp(-opacity_logits[g]))
        frame = _gaussian_frame(
            positions[g], log_scales[g], rotations[g], view_rotation, view_translation
        )
        t = frame[0]
        sigma = frame[6]
        depths[g] = t[2]
        if t[2] <= near:
            continue
        transform = _screen_transform(t, focal, view_rotation)[1]
        a, b, d = _project_covariance(transform, sigma)
        covariances[g, 0] = a
        covariances[g, 1] = b
        covariances[g, 2] = d
        a += blur
        d += blur
        det = a * d - b * b
        if det <= 0.0:
            continue
        conics[g, 0] = d / det
        conics[g, 1] = -b / det
        conics[g, 2] = a / det
        means2d[g, 0] = focal * t[0] / t[2] + cx
        means2d[g, 1] = focal * t[1] / t[2] + cy
        radii[g] = extent_radius(a, b, d, extent_sigma)
    return means2d, covariances, conics, depths, radii, opacities


@njit(cache=True, nogil=True)
def bin_tiles(order, means2d, radii, width, height, tile_size):
    """Tile lists in depth order, as CSR (offsets per tile, gaussian ids).

    The pixel range of each gaussian is widened by one pixel so the per-pixel
    test in the rasterizer is the only one that decides coverage.
    """
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    rects = np.full((order.shape[0], 4), -1, dtype=np.int64)
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        r = radii[g]
        if r <= 0.0:
            continue
        x0 = min(max(means2d[g, 0] - r - 0.5, -1.0), width + 1.0)
        x1 = min(max(means2d[g, 0] + r - 0.5, -1.0), width + 1.0)
        y0 = min(max(means2d[g, 1] - r - 0.5, -1.0), height + 1.0)
        y1 = min(max(means2d[g, 1] + r - 0.5, -1.0), height + 1.0)
        px0 = max(int(math.floor(x0)), 0)
        px1 = min(int(math.ceil(x1)), width - 1)
        py0 = max(int(math.floor(y0)), 0)
        py1 = min(int(math.ceil(y1)), height - 1)
        if px0 > px1 or py0 > py1:
            continue
        rects[k, 0] = px0 // tile_size
        rects[k, 1] = py0 // tile_size
        rects[k, 2] = px1 // tile_size
        rects[k, 3] = py1 // tile_size
        for ty in range(rects[k, 1], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 2] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        if rects[k, 0] < 0:
            continue
        for ty in range(rects[k, 1], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 2] + 1):
                tile = ty * tiles_x + tx
                ids[fill[tile]] = order[k]
                fill[tile] += 1
    return offsets, ids


@njit(cache=True, nogil=True)
def splat_alpha(dx, dy, conic_a, conic_b, conic_c, radius, opacity, alpha_max):
    """Pixel alpha and gaussian falloff for displacement d = mean - pixel"""
    if radius <= 0.0 or abs(dx) > radius or abs(dy) > radius:
        return 0.0, 0.0
    power = -0.5 * (conic_a * dx * dx + conic_c * dy * dy) - conic_b * dx * dy
    falloff = math.exp(power)
    return min(alpha_max, opacity * falloff), falloff


@njit(cache=True, nogil=True, parallel=True)
def rasterize_forward(
    means2d,
    conics,
    radii,
    opacities,
    colors,
    offsets,
    ids,
    width,
    height,
    tile_size,
    background,
    alpha_min,
    alpha_max,
    transmittance_min,
):
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    image = np.zeros((height, width, 3))
    alpha_map = np.zeros((height, width))
    variance = np.zeros((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    for tile in prange(tiles_x * tiles_y):
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                ux = px + 0.5
                uy = py + 0.5
                transmittance = 1.0
                r = 0.0
                gr = 0.0
                b = 0.0
                var = 0.0
                walked = 0
                for e in range(start, end):
                    walked = e - start + 1
                    g = ids[e]
                    alpha, _ = splat_alpha(
                        means2d[g, 0] - ux,
                        means2d[g, 1] - uy,
                        conics[g, 0],
                        conics[g, 1],
                        conics[g, 2],
                        radii[g],
                        opacities[g],
                        alpha_max,
                    )
                    if alpha < alpha_min:
                        continue
                    weight = alpha * transmittance
                    r += weight * colors[g, 0]
                    gr += weight * colors[g, 1]
                    b += weight * colors[g, 2]
                    var += weight * weight
                    transmittance *= 1.0 - alpha
                    if transmittance < transmittance_min:
                        break
                image[py, px, 0] = r + transmittance * background[0]
                image[py, px, 1] = gr + transmittance * background[1]
                image[py, px, 2] = b + transmittance * background[2]
                alpha_map[py, px] = 1.0 - transmittance
                variance[py, px] = var
                last[py, px] = walked
    return image, alpha_map, variance, last


@njit(cache=True, nogil=True, parallel=True)
def rasterize_backward(
    means2d,
    conics,
    radii,
    opacities,
    colors,
    offsets,
    ids,
    last,
    width,
    height,
    tile_size,
    background,
    alpha_min,
    alpha_max,
    grad_image,
):
    """Per tile-list entry partial gradients, columns:
    mean2d (2), conic (3), opacity (1), color (3)"""
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    partial = np.zeros((ids.shape[0], 9))
    for tile in prange(tiles_x * tiles_y):
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = offsets[tile]
        span = offsets[tile + 1] - start
        entries = np.empty(span, dtype=np.int64)
        alphas = np.empty(span)
        falloffs = np.empty(span)
        transmittances = np.empty(span)
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                ux = px + 0.5
                uy = py + 0.5
                g_r = grad_image[py, px, 0]
                g_g = grad_image[py, px, 1]
                g_b = grad_image[py, px, 2]
                # replay the forward walk
                transmittance = 1.0
                count = 0
                for e in range(start, start + last[py, px]):
                    g = ids[e]
                    alpha, falloff = splat_alpha(
                        means2d[g, 0] - ux,
                        means2d[g, 1] - uy,
                        conics[g, 0],
                        conics[g, 1],
                        conics[g, 2],
                        radii[g],
                        opacities[g],
                        alpha_max,
                    )
                    if alpha < alpha_min:
                        continue
                    entries[count] = e
                    alphas[count] = alpha
                    falloffs[count] = falloff
                    transmittances[count] = transmittance
                    count += 1
                    transmittance *= 1.0 - alpha
                # contribution of everything behind the current entry
                behind = transmittance * (
                    background[0] * g_r + background[1] * g_g + background[2] * g_b
                )
                for k in range(count - 1, -1, -1):
                    e = entries[k]
                    g = ids[e]
                    alpha = alphas[k]
                    t_k = transmittances[k]
                    weight = alpha * t_k
                    color_dot = colors[g, 0] * g_r + colors[g, 1] * g_g + colors[g, 2] * g_b
                    partial[e, 6] += weight * g_r
                    partial[e, 7] += weight * g_g
                    partial[e, 8] += weight * g_b
                    grad_alpha = t_k * color_dot - behind / (1.0 - alpha)
                    behind += weight * color_dot
                    if opacities[g] * falloffs[k] > alpha_max:
                        continue
                    partial[e, 5] += grad_alpha * falloffs[k]
                    grad_power = grad_alpha * alpha
                    dx = means2d[g, 0] - ux
                    dy = means2d[g, 1] - uy
                    partial[e, 0] -= grad_power * (conics[g, 0] * dx + conics[g, 1] * dy)
                    partial[e, 1] -= grad_power * (conics[g, 1] * dx + conics[g, 2] * dy)
                    partial[e, 2] -= grad_power * 0.5 * dx * dx
                    partial[e, 3] -= grad_power * dx * dy
                    partial[e, 4] -= grad_power * 0.5 * dy * dy
    return partial


@njit(cache=True, nogil=True)
def reduce_partials(partial, ids, n_gaussians):
    """Sum per-entry partials into per-gaussian slots in fixed entry order"""
    grads = np.zeros((n_gaussians, partial.shape[1]))
    for e in range(ids.shape[0]):
        g = ids[e]
        for k in range(partial.shape[1]):
            grads[g, k] += partial[e, k]
    return grads


@njit(cache=True, nogil=True, parallel=True)
def project_backward(
    positions,
    log_scales,
    rotations,
    opacity_logits,
    radii,
    view_rotation,
    view_translation,
    focal,
    blur,
    grad_means2d,
    grad_conics,
    grad_opacities,
):
    """Chain screen-space gradients back to the stored parameters"""
    n = positions.shape[0]
    grad_positions = np.zeros((n, 3))
    grad_log_scales = np.zeros((n, 3))
    grad_rotations = np.zeros((n, 4))
    grad_logits = np.zeros(n)
    for g in prange(n):
        opacity = 1.0 / (1.0 + math.exp(-opacity_logits[g]))
        grad_logits[g] = grad_opacities[g] * opacity * (1.0 - opacity)
        if radii[g] <= 0.0:
            continue
        t, norm, q, r, s, m, sigma = _gaussian_frame(
            positions[g], log_scales[g], rotations[g], view_rotation, view_translation
        )
        transform = _screen_transform(t, focal, view_rotation)[1]
        a, b, d = _project_covariance(transform, sigma)
        a += blur
        d += blur
        det = a * d - b * b
        ca = d / det
        cb = -b / det
        cc = a / det

        # conic = inverse(cov2d + blur I): dL/dcov = -C G C, G symmetric
        ga = grad_conics[g, 0]
        gh = 0.5 * grad_conics[g, 1]
        gc = grad_conics[g, 2]
        p00 = ga * ca + gh * cb
        p01 = ga * cb + gh * cc
        p10 = gh * ca + gc * cb
        p11 = gh * cb + gc * cc
        k00 = ca * p00 + cb * p10
        k01 = ca * p01 + cb * p11
        k11 = cb * p01 + cc * p11
        g2 = np.empty((2, 2))
        g2[0, 0] = -k00
        g2[0, 1] = -k01
        g2[1, 0] = -k01
        g2[1, 1] = -k11

        # cov2d = T Sigma T^T
        g2t = np.empty((2, 3))
        for i in range(2):
            for k in range(3):
                g2t[i, k] = g2[i, 0] * transform[0, k] + g2[i, 1] * transform[1, k]
        grad_sigma = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                grad_sigma[i, j] = transform[0, i] * g2t[0, j] + transform[1, i] * g2t[1, j]
        grad_transform = np.empty((2, 3))
        for i in range(2):
            for k in range(3):
                grad_transform[i, k] = 2.0 * (
                    g2t[i, 0] * sigma[0, k] + g2t[i, 1] * sigma[1, k] + g2t[i, 2] * sigma[2, k]
                )
        # T = J W_rot
        grad_jac = np.empty((2, 3))
        for i in range(2):
            for j in range(3):
                grad_jac[i, j] = (
                    grad_transform[i, 0] * view_rotation[j, 0]
                    + grad_transform[i, 1] * view_rotation[j, 1]
                    + grad_transform[i, 2] * view_rotation[j, 2]
                )

        # mean2d and J as functions of the view point
        tx = t[0]
        ty = t[1]
        tz = t[2]
        gu = grad_means2d[g, 0]
        gv = grad_means2d[g, 1]
        inv_z = 1.0 / tz
        inv_z2 = inv_z * inv_z
        inv_z3 = inv_z2 * inv_z
        grad_t = np.empty(3)
        grad_t[0] = gu * focal * inv_z - grad_jac[0, 2] * focal * inv_z2
        grad_t[1] = gv * focal * inv_z - grad_jac[1, 2] * focal * inv_z2
        grad_t[2] = (
            -gu * focal * tx * inv_z2
            - gv * focal * ty * inv_z2
            - grad_jac[0, 0] * focal * inv_z2
            + grad_jac[0, 2] * 2.0 * focal * tx * inv_z3
            - grad_jac[1, 1] * focal * inv_z2
            + grad_jac[1, 2] * 2.0 * focal * ty * inv_z3
        )
        for j in range(3):
            grad_positions[g, j] = (
                view_rotation[0, j] * grad_t[0]
                + view_rotation[1, j] * grad_t[1]
                + view_rotation[2, j] * grad_t[2]
            )

        # Sigma = M M^T, M = R diag(s)
        grad_m = np.empty((3, 3))
        for i in range(3):
            for k in range(3):
                grad_m[i, k] = 2.0 * (
                    grad_sigma[i, 0] * m[0, k]
                    + grad_sigma[i, 1] * m[1, k]
                    + grad_sigma[i, 2] * m[2, k]
                )
        gr = np.empty((3, 3))
        for k in range(3):
            grad_scale = 0.0
            for i in range(3):
                grad_scale += grad_m[i, k] * r[i, k]
                gr[i, k] = grad_m[i, k] * s[k]
            grad_log_scales[g, k] = grad_scale * s[k]

        # R(q) for the unit quaternion
        w = q[0]
        x = q[1]
        y = q[2]
        z = q[3]
        gq = np.empty(4)
        gq[0] = 2.0 * (
            -z * gr[0, 1] + y * gr[0, 2] + z * gr[1, 0] - x * gr[1, 2] - y * gr[2, 0] + x * gr[2, 1]
        )
        gq[1] = 2.0 * (
            y * gr[0, 1]
            + z * gr[0, 2]
            + y * gr[1, 0]
            - 2.0 * x * gr[1, 1]
            - w * gr[1, 2]
            + z * gr[2, 0]
            + w * gr[2, 1]
            - 2.0 * x * gr[2, 2]
        )
        gq[2] = 2.0 * (
            -2.0 * y * gr[0, 0]
            + x * gr[0, 1]
            + w * gr[0, 2]
            + x * gr[1, 0]
            + z * gr[1, 2]
            - w * gr[2, 0]
            + z * gr[2, 1]
            - 2.0 * y * gr[2, 2]
        )
        gq[3] = 2.0 * (
            -2.0 * z * gr[0, 0]
            - w * gr[0, 1]
            + x * gr[0, 2]
            + w * gr[1, 0]
            - 2.0 * z * gr[1, 1]
            + y * gr[1, 2]
            + x * gr[2, 0]
            + y * gr[2, 1]
        )
        # q = raw / |raw|
        radial = gq[0] * q[0] + gq[1] * q[1] + gq[2] * q[2] + gq[3] * q[3]
        for i in range(4):
            grad_rotations[g, i] = (gq[i] - q[i] * radial) / norm
    return grad_positions, grad_log_scales, grad_rotations, grad_logits


@njit(cache=True, nogil=True)
def contribution_weights(
    means2d,
    conics,
    radii,
    opacities,
    offsets,
    ids,
    last,
    width,
    height,
    tile_size,
    alpha_min,
    alpha_max,
):
    """Per-pixel compositing weights alpha_i * T_i as COO triplets (pixel, gaussian, weight).

    Pixels are numbered row-major. Skipped entries keep a zero weight.
    """
    tiles_x = (width + tile_size - 1) // tile_size
    total = 0
    for py in range(height):
        for px in range(width):
            total += last[py, px]
    rows = np.zeros(total, dtype=np.int64)
    cols = np.zeros(total, dtype=np.int64)
    weights = np.zeros(total)
    slot = 0
    for py in range(height):
        for px in range(width):
            tile = (py // tile_size) * tiles_x + px // tile_size
            start = offsets[tile]
            transmittance = 1.0
            for e in range(start, start + last[py, px]):
                g = ids[e]
                alpha, _ = splat_alpha(
                    means2d[g, 0] - (px + 0.5),
                    means2d[g, 1] - (py + 0.5),
                    conics[g, 0],
                    conics[g, 1],
                    conics[g, 2],
                    radii[g],
                    opacities[g],
                    alpha_max,
                )
                rows[slot] = py * width + px
                cols[slot] = g
                if alpha >= alpha_min:
                    weights[slot] = alpha * transmittance
                    transmittance *= 1.0 - alpha
                slot += 1
    return rows, cols, weights
