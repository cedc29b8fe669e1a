import init, { gaussian_energies, inference_curves, mc_convergence } from "./pkg/gpc_web.js";

const $ = (id) => document.getElementById(id);

function bindLabel(id) {
  const show = () => { $(id + "-v").textContent = $(id).value; };
  $(id).addEventListener("input", show);
  show();
}

function drawLines(canvas, series, { logY = false, xLabels = null } = {}) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const pad = 40;
  const tf = (v) => (logY ? Math.log10(v) : v);
  const all = series.flatMap((s) => s.values.filter((v) => Number.isFinite(v) && (!logY || v > 0)).map(tf));
  if (all.length === 0) return;
  let lo = Math.min(...all), hi = Math.max(...all);
  if (hi === lo) { hi += 1; lo -= 1; }
  const n = Math.max(...series.map((s) => s.values.length));
  const x = (i) => pad + (i / Math.max(1, n - 1)) * (w - 2 * pad);
  const y = (v) => h - pad - ((tf(v) - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.font = "12px sans-serif";
  ctx.fillText((logY ? "1e" : "") + hi.toFixed(logY ? 1 : 2), 2, pad + 4);
  ctx.fillText((logY ? "1e" : "") + lo.toFixed(logY ? 1 : 2), 2, h - pad + 4);
  if (xLabels) xLabels.forEach((t, i) => ctx.fillText(t, x(i) - 10, h - pad + 16));
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    let started = false;
    s.values.forEach((v, i) => {
      if (!Number.isFinite(v) || (logY && v <= 0)) { started = false; return; }
      if (started) ctx.lineTo(x(i), y(v)); else { ctx.moveTo(x(i), y(v)); started = true; }
    });
    ctx.stroke();
  }
}

function updateEnergies() {
  const [sq, kl, mc] = gaussian_energies(+$("u").value, +$("s").value, +$("uh").value, +$("sh").value, +$("n").value, 7n);
  $("energies").textContent =
    `squared error (u - û)^2     ${sq.toFixed(5)}\n` +
    `KL(N(u,s) || N(û,ŝ))        ${kl.toFixed(5)}\n` +
    `sampled KL                   ${mc.toFixed(5)}`;
}

function updateCurves() {
  const steps = +$("steps").value;
  let seed = BigInt(Math.max(0, Math.floor(+$("seed").value || 0)));
  const c = inference_curves(+$("beta").value, steps, seed);
  const f = Array.from(c.slice(0, steps + 1));
  const kl = Array.from(c.slice(steps + 1));
  drawLines($("curves"), [{ values: f, color: "#c0392b" }, { values: kl, color: "#2471a3" }]);
}

function updateMc() {
  const pow = 6;
  const m = mc_convergence(+$("k").value, pow, BigInt(+$("rep").value), 3n);
  const labels = Array.from({ length: pow }, (_, i) => `1e${i + 1}`);
  drawLines($("mc"), [{ values: Array.from(m), color: "#1e8449" }], { logY: true, xLabels: labels });
}

function guarded(f) {
  return () => {
    try { f(); $("status").textContent = ""; }
    catch (e) { $("status").textContent = "error: " + (e.message || e); }
  };
}

await init();
for (const id of ["u", "s", "uh", "sh", "beta", "steps", "k", "rep"]) bindLabel(id);
for (const id of ["u", "s", "uh", "sh", "n"]) $(id).addEventListener("input", guarded(updateEnergies));
for (const id of ["beta", "steps", "seed"]) $(id).addEventListener("input", guarded(updateCurves));
$("mc-run").addEventListener("click", guarded(updateMc));
guarded(updateEnergies)();
guarded(updateCurves)();
guarded(updateMc)();
