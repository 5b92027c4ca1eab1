import init, { dro_weights, synthetic_histogram, scaling_curve, optimal_split } from "./pkg/bfm_web.js";

const $ = (id) => document.getElementById(id);
const nums = (s) => s.split(/[\s,]+/).filter(Boolean).map(Number);

function bars(canvas, values, color, labels) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const max = Math.max(...values, 1e-12);
  const bw = w / values.length;
  values.forEach((v, i) => {
    const bh = (v / max) * (h - 20);
    ctx.fillStyle = color;
    ctx.fillRect(i * bw + 1, h - bh - 14, Math.max(bw - 2, 1), bh);
    if (labels && bw > 18) {
      ctx.fillStyle = "#444";
      ctx.font = "11px sans-serif";
      ctx.fillText(labels[i], i * bw + 2, h - 2);
    }
  });
}

function line(canvas, xs, ys) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const lx = xs.map(Math.log10);
  const [x0, x1] = [Math.min(...lx), Math.max(...lx)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const px = (x) => 40 + ((x - x0) / (x1 - x0 || 1)) * (w - 50);
  const py = (y) => h - 20 - ((y - y0) / (y1 - y0 || 1)) * (h - 30);
  ctx.strokeStyle = "#2a6";
  ctx.lineWidth = 2;
  ctx.beginPath();
  lx.forEach((x, i) => (i ? ctx.lineTo(px(x), py(ys[i])) : ctx.moveTo(px(x), py(ys[i]))));
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  ctx.fillText(`D = 1e${x0.toFixed(0)}`, 40, h - 4);
  ctx.fillText(`1e${x1.toFixed(0)}`, w - 40, h - 4);
  ctx.fillText(y1.toFixed(3), 2, 12);
  ctx.fillText(y0.toFixed(3), 2, h - 22);
}

function show(id, fn) {
  const out = $(id);
  try {
    out.classList.remove("err");
    out.textContent = fn();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e.message ?? e);
  }
}

function updateDro() {
  $("dro-eps-v").textContent = $("dro-eps").value;
  show("dro-out", () => {
    const w = Array.from(dro_weights(nums($("dro-losses").value), nums($("dro-prior").value), Number($("dro-eps").value)));
    bars($("dro-canvas"), w, "#c63", w.map((_, i) => `b${i}`));
    return "weights: " + w.map((x) => x.toFixed(3)).join("  ");
  });
}

function updateHist() {
  for (const k of ["h-nb", "h-zipf", "h-users"]) $(k + "-v").textContent = $(k).value;
  show("hist-out", () => {
    const h = Array.from(
      synthetic_histogram(Number($("h-nb").value), Number($("h-zipf").value), Number($("h-users").value), 200, Number($("h-seed").value))
    );
    bars($("hist-canvas"), h, "#36c");
    const total = h.reduce((a, b) => a + b, 0);
    const top = h.slice(0, Math.ceil(h.length / 10)).reduce((a, b) => a + b, 0);
    return `${total} records; top 10% of behaviors hold ${((100 * top) / total).toFixed(1)}%`;
  });
}

function updateScaling() {
  for (const k of ["s-alpha", "s-beta", "s-n", "s-budget"]) $(k + "-v").textContent = $(k).value;
  const [a, b] = [Number($("s-alpha").value), Number($("s-beta").value)];
  const n = 10 ** Number($("s-n").value);
  show("s-out", () => {
    const c = Array.from(scaling_curve(400, a, 400, b, 1.7, n, 1e5, 1e12, 80));
    line($("s-canvas"), c.filter((_, i) => i % 2 === 0), c.filter((_, i) => i % 2 === 1));
    const [nOpt, dOpt, ratio] = optimal_split(400, a, 400, b, 10 ** Number($("s-budget").value));
    return `optimal N = ${nOpt.toExponential(2)}, D = ${dOpt.toExponential(2)}, D/N = ${ratio.toFixed(2)}`;
  });
}

await init();
for (const id of ["dro-losses", "dro-prior", "dro-eps"]) $(id).addEventListener("input", updateDro);
for (const id of ["h-nb", "h-zipf", "h-users", "h-seed"]) $(id).addEventListener("input", updateHist);
for (const id of ["s-alpha", "s-beta", "s-n", "s-budget"]) $(id).addEventListener("input", updateScaling);
updateDro();
updateHist();
updateScaling();
