import numpy as np
from mmentail import nn
from mmentail.optim import grad_check

rng = np.random.default_rng(42)

# dense
x = rng.standard_normal((4, 5))
w = rng.standard_normal((5, 3))
b = rng.standard_normal(3)
t = rng.standard_normal((4, 3))
params = {"w": w, "b": b}

def loss_dense():
    out, _ = nn.dense(x, w, b, "relu")
    return float(((out - t) ** 2).sum())

out, cache = nn.dense(x, w, b, "relu")
dx, dw, db = nn.dense_backward(cache, 2 * (out - t))
print("dense:", grad_check(loss_dense, params, {"w": dw, "b": db}))

# gru
X = rng.standard_normal((2, 6, 3))
gp = nn.GruParams.init(rng, 3, 4)
names = ("w_z", "w_r", "w_c", "u_z", "u_r", "u_c", "b_z", "b_r", "b_c")
gparams = {k: getattr(gp, k) for k in names}
tg = rng.standard_normal((2, 6, 4))
tf = rng.standard_normal((2, 4))

def loss_gru():
    (ctx, fin), _ = nn.gru_forward(X, gp)
    return float(((ctx - tg) ** 2).sum() + ((fin - tf) ** 2).sum())

(ctx, fin), cache = nn.gru_forward(X, gp)
dX, g = nn.gru_backward(cache, 2 * (ctx - tg), 2 * (fin - tf))
print("gru:", grad_check(loss_gru, gparams, g))

# gru input gradient
xparams = {"X": X}
print("gru dX:", grad_check(loss_gru, xparams, {"X": dX}))

# conv
Xc = rng.standard_normal((2, 7, 8, 2))
K = rng.standard_normal((3, 3, 2, 4)) * 0.3
bc = rng.standard_normal(4)
tc = rng.standard_normal((2, 5, 6, 4))

def loss_conv():
    out, _ = nn.conv2d_valid(Xc, K, bc)
    return float(((out - tc) ** 2).sum())

out, cache = nn.conv2d_valid(Xc, K, bc)
dXc, dK, dbc = nn.conv2d_valid_backward(cache, 2 * (out - tc))
print("conv:", grad_check(loss_conv, {"K": K, "b": bc, "X": Xc}, {"K": dK, "b": dbc, "X": dXc}))

# maxpool (through conv input)
tp = rng.standard_normal((2, 3, 2, 2))

def loss_pool():
    out, _ = nn.maxpool2d(Xc, (2, 3))
    return float(((out - tp) ** 2).sum())

out, cache = nn.maxpool2d(Xc, (2, 3))
dXp = nn.maxpool2d_backward(cache, 2 * (out - tp))
print("pool:", grad_check(loss_pool, {"X": Xc}, {"X": dXp}))

# sdp attention
Q = rng.standard_normal((3, 4))
Kk = rng.standard_normal((5, 4))
V = rng.standard_normal((5, 2))
ta = rng.standard_normal((3, 2))

def loss_attn():
    out, _ = nn.sdp_attention(Q, Kk, V)
    return float(((out - ta) ** 2).sum())

out, cache = nn.sdp_attention(Q, Kk, V)
dQ, dK2, dV = nn.sdp_attention_backward(cache, 2 * (out - ta))
print("attn:", grad_check(loss_attn, {"Q": Q, "K": Kk, "V": V}, {"Q": dQ, "K": dK2, "V": dV}))

# self attention
Xs = rng.standard_normal((4, 3))
ts = rng.standard_normal((4, 3))

def loss_self():
    out, _ = nn.self_attention(Xs)
    return float(((out - ts) ** 2).sum())

out, cache = nn.self_attention(Xs)
dXs = nn.self_attention_backward(cache, 2 * (out - ts))
print("selfattn:", grad_check(loss_self, {"X": Xs}, {"X": dXs}))

# batchnorm (train and inference)
xb = rng.standard_normal((6, 4))
bn = nn.BatchNormParams.init(4)
bn.running_mean = rng.standard_normal(4) * 0.1
bn.running_var = 1.0 + rng.random(4)
tb = rng.standard_normal((6, 4))

for mode in (True, False):
    bp = nn.BatchNormParams(bn.gamma.copy(), bn.beta.copy(), bn.running_mean.copy(), bn.running_var.copy())

    def loss_bn():
        saved = (bp.running_mean.copy(), bp.running_var.copy())
        out, _ = nn.batchnorm(xb, bp, train=mode)
        bp.running_mean, bp.running_var = saved
        return float(((out - tb) ** 2).sum())

    out, cache = nn.batchnorm(xb, bp, train=mode)
    dxb, dg, dbta = nn.batchnorm_backward(cache, 2 * (out - tb))
    print(f"bn train={mode}:", grad_check(loss_bn, {"x": xb, "g": bp.gamma, "b": bp.beta}, {"x": dxb, "g": dg, "b": dbta}))

# softmax cross entropy
lg = rng.standard_normal((5, 3))
labels = np.array([0, 2, 1, 1, 0])

def loss_ce():
    loss, _, _ = nn.softmax_cross_entropy(lg, labels)
    return float(loss)

loss, probs, dlg = nn.softmax_cross_entropy(lg, labels)
print("ce:", grad_check(loss_ce, {"lg": lg}, {"lg": dlg}))
