/* Fused RMSProp update; restrict lets the compiler vectorize the loop. */
#ifndef IAUNET_RMSPROP_H
#define IAUNET_RMSPROP_H
#include <math.h>
#include <stddef.h>

#define IAUNET_RMSPROP(NAME, T, SQRT)                                          \
static void NAME(T *restrict p, const T *restrict g, T *restrict v,            \
                 T *restrict m, ptrdiff_t n, T lr, T a, T b, T mu, T wd, T e)  \
{                                                                              \
    for (ptrdiff_t i = 0; i < n; ++i) {                                        \
        T gp = g[i] + wd * p[i];                                               \
        T vi = v[i] * a + b * (gp * gp);                                       \
        T mi = m[i] * mu + gp / SQRT(vi + e);                                  \
        v[i] = vi;                                                             \
        m[i] = mi;                                                             \
        p[i] = p[i] - lr * mi;                                                 \
    }                                                                          \
}

IAUNET_RMSPROP(iaunet_rmsprop_f32, float, sqrtf)
IAUNET_RMSPROP(iaunet_rmsprop_f64, double, sqrt)

#endif
