import init, { generate_event, encode_event, energy_estimate } from "./pkg/gridspike_demo.js";

const $ = (id) => document.getElementById(id);
const colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

function plotSignals(view) {
  const c = $("signals"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const all = view.signals.flat();
  let lo = Math.min(...all), hi = Math.max(...all);
  if (hi - lo < 1e-9) { lo -= 1; hi += 1; }
  const n = view.t.length;
  const x = (k) => 40 + (k / (n - 1)) * (c.width - 60);
  const y = (v) => c.height - 20 - ((v - lo) / (hi - lo)) * (c.height - 40);
  view.signals.forEach((s, i) => {
    g.strokeStyle = colors[i % colors.length];
    g.beginPath();
    s.forEach((v, k) => (k ? g.lineTo(x(k), y(v)) : g.moveTo(x(k), y(v))));
    g.stroke();
    g.fillStyle = g.strokeStyle;
    g.fillText(view.ids[i], c.width - 50, 15 + 12 * i);
  });
}

function plotRaster(view) {
  const c = $("raster"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const w = c.width / view.n_bins, h = c.height / view.n_neurons;
  g.fillStyle = "#000";
  for (const [neuron, bin] of view.spikes) {
    g.fillRect(bin * w, neuron * h, Math.max(w, 1), Math.max(h, 1));
  }
  $("encinfo").textContent = `${view.spikes.length} spikes, mean rate ${view.rate.toFixed(4)} per neuron per bin`;
}

function guard(f) {
  return () => {
    try { f(); } catch (e) { alert(e.message ?? e); }
  };
}

await init();
$("gen").onclick = guard(() => plotSignals(JSON.parse(generate_event($("cls").value, +$("seed").value))));
$("rate").oninput = () => ($("rateval").textContent = $("rate").value);
$("enc").onclick = guard(() =>
  plotRaster(JSON.parse(encode_event($("cls").value, +$("seed").value, +$("rate").value, +$("bins").value))));
$("nrg").onclick = guard(() => {
  const r = JSON.parse(energy_estimate(+$("ops").value, +$("perop").value, +$("steps").value));
  $("report").textContent =
    `energy ratio   ${r.energy_ratio.toFixed(3)}\n` +
    `saving         ${r.saving_pct.toFixed(2)} %\n` +
    `power ratio    ${r.power_ratio.toFixed(2)}\n` +
    r.note;
});
$("gen").click();
