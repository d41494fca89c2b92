/**
 * Backend entry point: `node dist/main.js`.
 *
 * stdout carries protocol responses only; everything the framework or runtime
 * wants to log is rerouted to stderr before the framework loads (its Node
 * banner would otherwise corrupt the stream).
 */

console.log = console.error;

const tf = await import("@tensorflow/tfjs");
const { serve } = await import("./protocol.js");

await serve(tf, process.stdin, process.stdout);
