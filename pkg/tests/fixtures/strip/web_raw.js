// Device registry client.
const BASE = "https://example.test"; // endpoint root

/* Block header
   spanning lines */
function register(name) {
    const url = `${BASE}/register`; // template literal
    const note = "http://inline // not a comment";
    /* inline */ return fetch(url, { body: name, note });
}
