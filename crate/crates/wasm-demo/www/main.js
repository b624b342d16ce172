import init, { decay_curve, soft_targets, planted_teacher } from "./pkg/prvr_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function guarded(errId, fn) {
  return () => {
    $(errId).textContent = "";
    try {
      fn();
    } catch (e) {
      $(errId).textContent = String(e.message ?? e);
    }
  };
}

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
}

function polyline(ctx, ys, { w, h, pad, lo, hi, color }) {
  const sx = (w - 2 * pad) / Math.max(ys.length - 1, 1);
  const sy = (h - 2 * pad) / (hi - lo || 1);
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ys.forEach((y, i) => {
    const px = pad + i * sx;
    const py = h - pad - (Math.min(Math.max(y, lo), hi) - lo) * sy;
    i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
  });
  ctx.stroke();
  ctx.lineWidth = 1;
}

const drawDecay = guarded("decay-err", () => {
  const canvas = $("decay-plot");
  const ctx = canvas.getContext("2d");
  const geom = { w: canvas.width, h: canvas.height, pad: 24, lo: 0, hi: 1 };
  const tMax = Math.max(1, Math.floor(num("t-max")));
  axes(ctx, geom.w, geom.h, geom.pad);
  const curves = [
    ["exponential", num("exp-k"), 1, "#1f77b4"],
    ["linear", num("lin-k"), num("lin-b"), "#d62728"],
    ["sigmoid", num("sig-k"), 1, "#2ca02c"],
    ["fixed", 1, 1, "#888"],
  ];
  for (const [kind, k, b, color] of curves) {
    polyline(ctx, decay_curve(kind, k, b, tMax), { ...geom, color });
  }
  ctx.fillStyle = "#555";
  ctx.fillText("1", 8, geom.pad + 4);
  ctx.fillText(`t = ${tMax}`, geom.w - 60, geom.h - 6);
});

// Small deterministic generator so the guidance matrix is reproducible per seed.
function mulberry32(seed) {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

const drawTargets = guarded("targets-err", () => {
  const n = Math.min(32, Math.max(2, Math.floor(num("st-n"))));
  const rand = mulberry32(num("st-seed"));
  const guidance = new Float64Array(n * n);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      guidance[i * n + j] = i === j ? 0.6 + 0.4 * rand() : 1.2 * rand() - 0.2;
    }
  }
  const alpha = num("st-alpha");
  const beta = num("st-beta");
  const t = soft_targets(guidance, n, alpha, beta, $("st-norm").checked);
  const canvas = $("targets-plot");
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / n;
  const max = Math.max(...t);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const v = t[i * n + j] / (max || 1);
      const shade = Math.round(255 * (1 - v));
      ctx.fillStyle = `rgb(${shade},${shade},255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
  const hard = Math.floor(alpha * n + 1e-12);
  ctx.strokeStyle = "#d62728";
  ctx.strokeRect(0.5, 0.5, canvas.width - 1, hard * cell);
  let off = 0;
  t.forEach((v, k) => {
    if (Math.floor(k / n) !== k % n) off += v;
  });
  $("targets-info").textContent =
    `α=${alpha}, β=${beta}: ${hard} hard rows (outlined), off-diagonal mass ${off.toFixed(3)}`;
});

const drawTeacher = guarded("teacher-err", () => {
  const view = planted_teacher(
    Math.max(1, Math.floor(num("tq-frames"))),
    num("tq-quality"),
    num("tq-noise"),
    num("tq-lo"),
    num("tq-hi"),
    BigInt(Math.max(0, Math.floor(num("tq-seed")))),
  );
  const scores = view.scores;
  const canvas = $("teacher-plot");
  const ctx = canvas.getContext("2d");
  const geom = { w: canvas.width, h: canvas.height, pad: 24, lo: -1, hi: 1 };
  axes(ctx, geom.w, geom.h, geom.pad);
  const sx = (geom.w - 2 * geom.pad) / Math.max(scores.length - 1, 1);
  ctx.fillStyle = "rgba(255,160,0,0.25)";
  ctx.fillRect(geom.pad + (view.start - 0.5) * sx, geom.pad, (view.end - view.start + 1) * sx, geom.h - 2 * geom.pad);
  const zero = geom.h / 2;
  ctx.strokeStyle = "#ddd";
  ctx.beginPath();
  ctx.moveTo(geom.pad, zero);
  ctx.lineTo(geom.w - geom.pad, zero);
  ctx.stroke();
  polyline(ctx, Array.from(scores), { ...geom, color: "#1f77b4" });
  const peak = scores.indexOf(Math.max(...scores));
  const inside = peak >= view.start && peak <= view.end;
  $("teacher-info").textContent =
    `moment frames ${view.start}–${view.end} (M/V ${view.mv.toFixed(3)}); peak at frame ${peak}, ${inside ? "inside" : "outside"} the moment`;
  view.free();
});

await init();
for (const id of ["exp-k", "lin-k", "lin-b", "sig-k", "t-max"]) $(id).addEventListener("input", drawDecay);
for (const id of ["st-n", "st-alpha", "st-beta", "st-norm", "st-seed"]) $(id).addEventListener("input", drawTargets);
for (const id of ["tq-frames", "tq-quality", "tq-noise", "tq-lo", "tq-hi", "tq-seed"]) $(id).addEventListener("input", drawTeacher);
drawDecay();
drawTargets();
drawTeacher();
